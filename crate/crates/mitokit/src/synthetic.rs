//! Synthetic H&E-like fixtures.
//!
//! Everything here renders images *from* known stain models and
//! concentration fields, so estimation, deconvolution, detection and the
//! full cascade can be checked against ground truth without any slide data.
//! The examples and the acceptance suite build their scenes from this
//! module.

use rand::Rng;

use crate::stain::{od_to_rgb, OdImage, StainModel};
use crate::tiling::{AnnotationLabel, PointAnnotation};
use crate::RgbImage;

/// Reference hematoxylin OD direction (unit norm).
pub const RUIFROK_HEMATOXYLIN: [f64; 3] = [0.6500286018877385, 0.7040309780445659, 0.28601258483060493];
/// Reference eosin OD direction (unit norm).
pub const RUIFROK_EOSIN: [f64; 3] = [0.0721332449690492, 0.9918321183244265, 0.10519431557986342];

/// Angle between two 3-vectors in degrees.
pub fn angle_between_deg(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Draw a random valid stain model: two unit vectors with strictly positive
/// components, at least 15° apart, with a clear blue-channel separation so
/// the hematoxylin-first ordering is unambiguous. Rows come back ordered.
pub fn random_stain_model<R: Rng>(rng: &mut R) -> StainModel {
    loop {
        let a = normalize([
            rng.random_range(0.05..1.0),
            rng.random_range(0.05..1.0),
            rng.random_range(0.05..1.0),
        ]);
        let b = normalize([
            rng.random_range(0.05..1.0),
            rng.random_range(0.05..1.0),
            rng.random_range(0.05..1.0),
        ]);
        if angle_between_deg(&a, &b) < 15.0 {
            continue;
        }
        if (a[2] - b[2]).abs() < 0.05 {
            continue;
        }
        let (h, e) = if a[2] >= b[2] { (a, b) } else { (b, a) };
        return StainModel {
            stain_vectors: [h, e],
            max_concentrations: [1.0, 1.0],
        };
    }
}

/// Render an image from explicit per-pixel `(hematoxylin, eosin)`
/// concentration pairs under a stain model.
pub fn render_from_concentrations(
    width: u32,
    height: u32,
    model: &StainModel,
    conc_pairs: &[f64],
) -> RgbImage {
    assert_eq!(conc_pairs.len(), (width as usize) * (height as usize) * 2);
    let hv = model.stain_vectors[0];
    let ev = model.stain_vectors[1];
    let mut od = Vec::with_capacity(conc_pairs.len() / 2 * 3);
    for pair in conc_pairs.chunks_exact(2) {
        for c in 0..3 {
            od.push((pair[0] * hv[c] + pair[1] * ev[c]).max(0.0));
        }
    }
    od_to_rgb(&OdImage::from_pixels(width, height, od))
}

/// Random tissue texture: a mixture of pure-hematoxylin, pure-eosin, mixed
/// and background pixels. Pure pixels make the extreme stain angles well
/// populated, the way nuclei and stroma do in real slides.
///
/// Pure pixels draw from a few discrete concentration levels rather than a
/// continuum: each level quantizes to one exact RGB triple, so the extreme
/// angles of the OD cloud are crisp and percentile-estimated stain vectors
/// sit on the data cone instead of slicing through its noisy tail (where
/// the non-negativity clamp would distort reconstruction).
#[derive(Debug, Clone, Copy)]
pub struct TissueSampler {
    pub pure_fraction: f64,
    pub mixed_fraction: f64,
    /// Discrete concentration levels for pure-stain pixels.
    pub pure_levels: [f64; 3],
    /// Mixed pixels draw both concentrations from `[0.1, mixed_max]`.
    pub mixed_max: f64,
    /// Per-channel optical-density ceiling. 8-bit quantization noise in OD
    /// space grows exponentially as a channel darkens; capping keeps every
    /// channel bright enough that sub-quantization reconstruction holds.
    pub od_cap: f64,
}

impl Default for TissueSampler {
    fn default() -> Self {
        Self {
            pure_fraction: 0.25,
            mixed_fraction: 0.4,
            pure_levels: [0.55, 0.8, 1.05],
            mixed_max: 0.88,
            od_cap: 0.55,
        }
    }
}

impl TissueSampler {
    /// Sample one concentration pair.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 2] {
        let roll: f64 = rng.random_range(0.0..1.0);
        if roll < self.pure_fraction {
            [self.pure_levels[rng.random_range(0..self.pure_levels.len())], 0.0]
        } else if roll < 2.0 * self.pure_fraction {
            [0.0, self.pure_levels[rng.random_range(0..self.pure_levels.len())]]
        } else if roll < 2.0 * self.pure_fraction + self.mixed_fraction {
            [
                rng.random_range(0.1..self.mixed_max),
                rng.random_range(0.1..self.mixed_max),
            ]
        } else {
            [0.0, 0.0]
        }
    }

    /// Render a `width × height` image of sampled tissue under a model.
    ///
    /// Pixels whose OD would exceed `od_cap` in any channel have their
    /// concentration pair scaled down uniformly, which preserves the stain
    /// mixing direction (pure pixels stay pure, one exact color per level).
    pub fn render<R: Rng>(&self, width: u32, height: u32, model: &StainModel, rng: &mut R) -> RgbImage {
        let hv = model.stain_vectors[0];
        let ev = model.stain_vectors[1];
        let mut conc = Vec::with_capacity((width as usize) * (height as usize) * 2);
        for _ in 0..(width as usize) * (height as usize) {
            let mut pair = self.sample(rng);
            let od_max = (0..3)
                .map(|c| pair[0] * hv[c] + pair[1] * ev[c])
                .fold(0.0f64, f64::max);
            if od_max > self.od_cap {
                let scale = self.od_cap / od_max;
                pair[0] *= scale;
                pair[1] *= scale;
            }
            conc.push(pair[0]);
            conc.push(pair[1]);
        }
        render_from_concentrations(width, height, model, &conc)
    }
}

/// Parameters of a planted-blob scene.
#[derive(Debug, Clone, Copy)]
pub struct SceneParams {
    pub width: u32,
    pub height: u32,
    /// Side of each planted square blob.
    pub blob_size: u32,
    /// Hematoxylin concentration of planted true blobs (renders dark).
    pub dark_conc: f64,
    /// Hematoxylin concentration of decoy blobs (renders pale but above a
    /// candidate-detection threshold).
    pub light_conc: f64,
    /// Eosin concentration of anchor strips that pin down the second stain.
    pub eosin_conc: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        // blob_size matches the 32 px crop used by the fixture pipelines, so
        // a crop centered on a blob sees only blob pixels and its mean
        // darkness is the blob's own
        Self {
            width: 512,
            height: 384,
            blob_size: 32,
            dark_conc: 1.4,
            light_conc: 0.35,
            eosin_conc: 0.9,
        }
    }
}

/// A rendered scene with its ground truth.
#[derive(Debug, Clone)]
pub struct PlantedScene {
    pub image: RgbImage,
    /// Point annotations at the centers of the dark blobs.
    pub truths: Vec<PointAnnotation>,
    /// Centers of the decoy blobs (candidate false positives).
    pub decoys: Vec<(u32, u32)>,
}

/// Build a white scene with dark hematoxylin blobs at `dark_centers`, pale
/// hematoxylin decoys at `light_centers`, and two eosin strips anchoring
/// the stain basis. Centers are blob centers in image coordinates; blobs
/// must fit inside the image.
pub fn planted_blob_scene(
    image_id: &str,
    params: &SceneParams,
    model: &StainModel,
    dark_centers: &[(u32, u32)],
    light_centers: &[(u32, u32)],
) -> PlantedScene {
    let n = (params.width as usize) * (params.height as usize);
    let mut conc = vec![0.0f64; n * 2];
    let paint = |cx: u32, cy: u32, half: u32, stain: usize, value: f64, conc: &mut Vec<f64>| {
        let x0 = cx.saturating_sub(half);
        let y0 = cy.saturating_sub(half);
        let x1 = (cx + half).min(params.width);
        let y1 = (cy + half).min(params.height);
        for y in y0..y1 {
            for x in x0..x1 {
                conc[((y * params.width + x) as usize) * 2 + stain] = value;
            }
        }
    };

    let half = params.blob_size / 2;
    for &(cx, cy) in dark_centers {
        paint(cx, cy, half, 0, params.dark_conc, &mut conc);
    }
    for &(cx, cy) in light_centers {
        paint(cx, cy, half, 0, params.light_conc, &mut conc);
    }
    // eosin anchor strips near the top and bottom edges
    let strip_h = 12u32.min(params.height / 8).max(1);
    for y in 2..2 + strip_h {
        for x in (params.width / 4)..(3 * params.width / 4) {
            conc[((y * params.width + x) as usize) * 2 + 1] = params.eosin_conc;
        }
    }
    for y in (params.height - 2 - strip_h)..(params.height - 2) {
        for x in (params.width / 4)..(3 * params.width / 4) {
            conc[((y * params.width + x) as usize) * 2 + 1] = params.eosin_conc;
        }
    }

    let image = render_from_concentrations(params.width, params.height, model, &conc);
    let truths = dark_centers
        .iter()
        .map(|&(x, y)| PointAnnotation {
            image_id: image_id.to_string(),
            x,
            y,
            label: AnnotationLabel::Mitosis,
        })
        .collect();
    PlantedScene {
        image,
        truths,
        decoys: light_centers.to_vec(),
    }
}
