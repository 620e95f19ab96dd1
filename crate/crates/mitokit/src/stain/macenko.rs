//! Stain-vector estimation and per-pixel concentration solving.

use nalgebra::{Matrix3, Vector3};

use super::{
    dot3, rgb_to_od, ConcentrationMap, MacenkoConfig, OdImage, StainError, StainModel,
    MIN_STAIN_ANGLE_RAD,
};
use crate::RgbImage;

/// Eigenvalue ratio below which the tissue OD cloud is considered to have
/// collapsed onto a single direction. Two-stain H&E tissue sits orders of
/// magnitude above this; single-stain images land well below it even with
/// 8-bit quantization noise.
const PLANE_COLLAPSE_RATIO: f64 = 1e-4;

/// Linear-interpolation percentile of a sorted slice, `p` in `[0, 100]`.
pub(crate) fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// Estimate the stain basis of an H&E image with the Macenko method.
///
/// Tissue pixels (total OD above `cfg.od_threshold`) are projected onto the
/// plane of the top-2 singular directions of their OD cloud; the stain
/// vectors are the extreme angle-percentile directions within that plane.
/// Per-stain maxima are the `cfg.conc_percentile` percentile of tissue
/// concentrations under the estimated basis.
pub fn estimate_stain_model(img: &RgbImage, cfg: &MacenkoConfig) -> Result<StainModel, StainError> {
    estimate_stain_model_pooled(std::slice::from_ref(img), cfg)
}

/// Macenko estimation over the pooled tissue pixels of several images,
/// typically the patches of one tiled image (white padding never passes
/// the tissue threshold).
pub fn estimate_stain_model_pooled(
    images: &[RgbImage],
    cfg: &MacenkoConfig,
) -> Result<StainModel, StainError> {
    let mut tissue: Vec<Vector3<f64>> = Vec::new();
    for img in images {
        let od = rgb_to_od(img);
        tissue.extend(
            od.pixels()
                .filter(|p| p[0] + p[1] + p[2] > cfg.od_threshold)
                .map(|p| Vector3::new(p[0], p[1], p[2])),
        );
    }
    if tissue.len() < cfg.min_tissue_pixels {
        return Err(StainError::InsufficientTissue {
            found: tissue.len(),
            required: cfg.min_tissue_pixels,
        });
    }

    // Top-2 singular directions of the (uncentered) OD cloud via the 3x3
    // second-moment matrix.
    let mut second_moment = Matrix3::<f64>::zeros();
    for p in &tissue {
        second_moment += p * p.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(second_moment);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda1 = eig.eigenvalues[order[0]];
    let lambda2 = eig.eigenvalues[order[1]];
    let e1 = eig.eigenvectors.column(order[0]).into_owned();
    let e2 = eig.eigenvectors.column(order[1]).into_owned();
    if lambda1 <= 0.0 || lambda2 / lambda1 < PLANE_COLLAPSE_RATIO {
        return Err(StainError::DegenerateStains {
            detail: "tissue OD spans a single direction",
        });
    }

    // Rotate the in-plane basis so angles are measured around the mean
    // projection; this keeps the percentile window clear of the ±π wrap.
    let (mut m1, mut m2) = (0.0, 0.0);
    for p in &tissue {
        m1 += p.dot(&e1);
        m2 += p.dot(&e2);
    }
    let theta_m = m2.atan2(m1);
    let u = e1 * theta_m.cos() + e2 * theta_m.sin();
    let w = -e1 * theta_m.sin() + e2 * theta_m.cos();

    let mut phis: Vec<f64> = tissue.iter().map(|p| p.dot(&w).atan2(p.dot(&u))).collect();
    phis.sort_by(f64::total_cmp);
    let phi_lo = percentile(&phis, cfg.angle_percentile);
    let phi_hi = percentile(&phis, 100.0 - cfg.angle_percentile);
    if phi_hi - phi_lo <= MIN_STAIN_ANGLE_RAD {
        return Err(StainError::DegenerateStains {
            detail: "angle percentiles nearly collinear",
        });
    }

    let dir_lo = direction_in_plane(&u, &w, phi_lo)?;
    let dir_hi = direction_in_plane(&u, &w, phi_hi)?;

    // Hematoxylin-first ordering by blue-channel OD component.
    let (hema, eosin) = if dir_lo[2] >= dir_hi[2] {
        (dir_lo, dir_hi)
    } else {
        (dir_hi, dir_lo)
    };

    let mut model = StainModel {
        stain_vectors: [hema, eosin],
        max_concentrations: [0.0, 0.0],
    };
    if model.stain_angle() <= MIN_STAIN_ANGLE_RAD {
        return Err(StainError::DegenerateStains {
            detail: "estimated stain vectors nearly collinear",
        });
    }

    // High-percentile concentrations over the tissue pixels.
    let solver = ConcentrationSolver::new(&model)?;
    let mut conc_h: Vec<f64> = Vec::with_capacity(tissue.len());
    let mut conc_e: Vec<f64> = Vec::with_capacity(tissue.len());
    for p in &tissue {
        let [h, e] = solver.solve([p[0], p[1], p[2]]);
        conc_h.push(h);
        conc_e.push(e);
    }
    conc_h.sort_by(f64::total_cmp);
    conc_e.sort_by(f64::total_cmp);
    model.max_concentrations = [
        percentile(&conc_h, cfg.conc_percentile),
        percentile(&conc_e, cfg.conc_percentile),
    ];

    model.validate()?;
    Ok(model)
}

/// Unit direction at angle `phi` in the (u, w) plane, with tiny negative
/// components (quantization noise) clamped to zero.
fn direction_in_plane(
    u: &Vector3<f64>,
    w: &Vector3<f64>,
    phi: f64,
) -> Result<[f64; 3], StainError> {
    let v = u * phi.cos() + w * phi.sin();
    let clamped = Vector3::new(v.x.max(0.0), v.y.max(0.0), v.z.max(0.0));
    let norm = clamped.norm();
    if norm < 1e-6 {
        return Err(StainError::DegenerateStains {
            detail: "stain direction has no non-negative part",
        });
    }
    let n = clamped / norm;
    Ok([n.x, n.y, n.z])
}

/// Precomputed 2x2 least-squares solve of `od ≈ cᴴ·H + cᴱ·E`.
///
/// Negative solutions are clamped to zero; on well-posed pixels this equals
/// the non-negative least-squares answer at a fraction of the cost.
pub(crate) struct ConcentrationSolver {
    h: [f64; 3],
    e: [f64; 3],
    inv: [[f64; 2]; 2],
}

impl ConcentrationSolver {
    pub(crate) fn new(model: &StainModel) -> Result<Self, StainError> {
        if model.stain_angle() <= MIN_STAIN_ANGLE_RAD {
            return Err(StainError::DegenerateStains {
                detail: "cannot deconvolve with nearly collinear stains",
            });
        }
        let h = model.stain_vectors[0];
        let e = model.stain_vectors[1];
        let ghh = dot3(&h, &h);
        let ghe = dot3(&h, &e);
        let gee = dot3(&e, &e);
        let det = ghh * gee - ghe * ghe;
        let inv = [
            [gee / det, -ghe / det],
            [-ghe / det, ghh / det],
        ];
        Ok(Self { h, e, inv })
    }

    #[inline]
    pub(crate) fn solve(&self, od: [f64; 3]) -> [f64; 2] {
        let bh = dot3(&od, &self.h);
        let be = dot3(&od, &self.e);
        let ch = self.inv[0][0] * bh + self.inv[0][1] * be;
        let ce = self.inv[1][0] * bh + self.inv[1][1] * be;
        [ch.max(0.0), ce.max(0.0)]
    }
}

/// Solve per-pixel stain concentrations for a whole image.
pub fn deconvolve(img: &RgbImage, model: &StainModel) -> Result<ConcentrationMap, StainError> {
    deconvolve_od(&rgb_to_od(img), model)
}

/// Concentration solve over an already-transformed OD raster.
pub fn deconvolve_od(od: &OdImage, model: &StainModel) -> Result<ConcentrationMap, StainError> {
    let solver = ConcentrationSolver::new(model)?;
    let mut conc = Vec::with_capacity((od.width() as usize) * (od.height() as usize) * 2);
    for p in od.pixels() {
        let [h, e] = solver.solve(p);
        conc.push(h);
        conc.push(e);
    }
    Ok(ConcentrationMap::new(od.width(), od.height(), conc))
}
