//! Stain deconvolution and augmentation for H&E histopathology images.
//!
//! Light absorption by stains is linear in optical-density (OD) space
//! (Beer–Lambert), so an H&E pixel factors as `od ≈ cᴴ·H + cᴱ·E` where `H`
//! and `E` are unit stain direction vectors and `cᴴ`, `cᴱ` non-negative
//! concentrations. This module estimates the stain basis from an image
//! (Macenko method: top-2 singular plane of tissue OD plus extreme angle
//! percentiles), solves per-pixel concentrations, and re-renders images
//! after perturbing concentrations, which is the stain augmentation used to
//! simulate scanner and staining domain shift.

mod augment;
mod macenko;

pub use augment::{augment, generate_variants, perturbation_for_variant};
pub use macenko::{
    deconvolve, deconvolve_od, estimate_stain_model, estimate_stain_model_pooled,
};

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::RgbImage;

#[derive(Debug, Error)]
pub enum StainError {
    #[error("insufficient tissue: {found} pixels above the OD threshold, need {required}")]
    InsufficientTissue { found: usize, required: usize },
    #[error("degenerate stains: {detail}")]
    DegenerateStains { detail: &'static str },
    #[error("malformed stain model file: {0}")]
    MalformedModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optical-density raster: per channel, `od = -log10(max(I, 1) / 255)`.
///
/// Same dimensions as its source image; all values are finite and
/// non-negative (white is 0, the darkest representable pixel ~2.4).
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    width: u32,
    height: u32,
    od: Vec<f64>,
}

impl OdImage {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.od[i], self.od[i + 1], self.od[i + 2]]
    }

    /// Row-major iterator over per-pixel OD triples.
    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.od.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn from_pixels(width: u32, height: u32, od: Vec<f64>) -> Self {
        assert_eq!(od.len(), (width as usize) * (height as usize) * 3);
        assert!(od.iter().all(|v| v.is_finite() && *v >= 0.0));
        Self { width, height, od }
    }
}

/// Beer–Lambert transform into optical density.
///
/// Channel intensities are clamped at 1 before the log so the transform is
/// total; white (255) maps to OD 0.
pub fn rgb_to_od(img: &RgbImage) -> OdImage {
    let mut od = Vec::with_capacity(img.as_raw().len());
    for &v in img.as_raw() {
        od.push(channel_to_od(v));
    }
    OdImage {
        width: img.width(),
        height: img.height(),
        od,
    }
}

/// Inverse transform: `I = round(255 · 10^(−od))`, clamped to `[0, 255]`.
pub fn od_to_rgb(od: &OdImage) -> RgbImage {
    let buf: Vec<u8> = od.od.iter().map(|&v| od_to_channel(v)).collect();
    RgbImage::from_raw(od.width, od.height, buf).expect("buffer sized from dimensions")
}

#[inline]
pub(crate) fn channel_to_od(v: u8) -> f64 {
    -((v.max(1) as f64) / 255.0).log10()
}

#[inline]
pub(crate) fn od_to_channel(od: f64) -> u8 {
    (255.0 * 10f64.powf(-od)).round().clamp(0.0, 255.0) as u8
}

/// Estimated stain basis: two unit-norm, non-negative OD direction vectors
/// (hematoxylin first) and a high-percentile concentration per stain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainModel {
    /// Row 0 hematoxylin, row 1 eosin.
    pub stain_vectors: [[f64; 3]; 2],
    pub max_concentrations: [f64; 2],
}

/// Below this angle two stain directions are treated as collinear.
pub const MIN_STAIN_ANGLE_RAD: f64 = 1e-3;

impl StainModel {
    pub fn hematoxylin(&self) -> [f64; 3] {
        self.stain_vectors[0]
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.stain_vectors[1]
    }

    /// Angle in radians between the two stain directions.
    pub fn stain_angle(&self) -> f64 {
        let dot = dot3(&self.stain_vectors[0], &self.stain_vectors[1]);
        dot.clamp(-1.0, 1.0).acos()
    }

    /// Check unit norms, non-negativity, linear independence and the
    /// hematoxylin-first ordering convention (larger blue-channel OD).
    pub fn validate(&self) -> Result<(), StainError> {
        for v in &self.stain_vectors {
            let norm = dot3(v, v).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(StainError::DegenerateStains { detail: "stain vector not unit norm" });
            }
            if v.iter().any(|c| *c < 0.0 || !c.is_finite()) {
                return Err(StainError::DegenerateStains { detail: "negative stain component" });
            }
        }
        if self.stain_angle() <= MIN_STAIN_ANGLE_RAD {
            return Err(StainError::DegenerateStains { detail: "stain directions nearly collinear" });
        }
        if self.stain_vectors[0][2] < self.stain_vectors[1][2] {
            return Err(StainError::DegenerateStains {
                detail: "rows not in hematoxylin-first order (blue OD component)",
            });
        }
        if self.max_concentrations.iter().any(|c| *c < 0.0 || !c.is_finite()) {
            return Err(StainError::DegenerateStains { detail: "negative max concentration" });
        }
        Ok(())
    }

    /// Write the line-oriented key-value text format.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<(), StainError> {
        let h = self.stain_vectors[0];
        let e = self.stain_vectors[1];
        writeln!(w, "hematoxylin {} {} {}", h[0], h[1], h[2])?;
        writeln!(w, "eosin {} {} {}", e[0], e[1], e[2])?;
        writeln!(w, "max_concentration_h {}", self.max_concentrations[0])?;
        writeln!(w, "max_concentration_e {}", self.max_concentrations[1])?;
        Ok(())
    }

    pub fn write_text_file(&self, path: &Path) -> Result<(), StainError> {
        let f = std::fs::File::create(path)?;
        self.write_text(std::io::BufWriter::new(f))
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self, StainError> {
        let mut h: Option<[f64; 3]> = None;
        let mut e: Option<[f64; 3]> = None;
        let mut max_h: Option<f64> = None;
        let mut max_e: Option<f64> = None;
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let vals: Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
            let vals = vals.map_err(|err| StainError::MalformedModel(format!("{key}: {err}")))?;
            match (key, vals.as_slice()) {
                ("hematoxylin", [a, b, c]) => h = Some([*a, *b, *c]),
                ("eosin", [a, b, c]) => e = Some([*a, *b, *c]),
                ("max_concentration_h", [v]) => max_h = Some(*v),
                ("max_concentration_e", [v]) => max_e = Some(*v),
                _ => {
                    return Err(StainError::MalformedModel(format!("unexpected line: {line}")));
                }
            }
        }
        match (h, e, max_h, max_e) {
            (Some(h), Some(e), Some(mh), Some(me)) => Ok(Self {
                stain_vectors: [h, e],
                max_concentrations: [mh, me],
            }),
            _ => Err(StainError::MalformedModel("missing keys".into())),
        }
    }

    pub fn read_text_file(path: &Path) -> Result<Self, StainError> {
        let f = std::fs::File::open(path)?;
        Self::read_text(std::io::BufReader::new(f))
    }
}

pub(crate) fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Per-pixel hematoxylin/eosin concentration pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationMap {
    width: u32,
    height: u32,
    conc: Vec<f64>,
}

impl ConcentrationMap {
    pub(crate) fn new(width: u32, height: u32, conc: Vec<f64>) -> Self {
        debug_assert_eq!(conc.len(), (width as usize) * (height as usize) * 2);
        Self { width, height, conc }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// `(hematoxylin, eosin)` concentrations at a pixel.
    pub fn pixel(&self, x: u32, y: u32) -> [f64; 2] {
        let i = ((y * self.width + x) * 2) as usize;
        [self.conc[i], self.conc[i + 1]]
    }

    /// Row-major iterator over concentration pairs.
    pub fn pixels(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.conc.chunks_exact(2).map(|c| [c[0], c[1]])
    }

    /// One stain's concentration at a flat pixel index.
    pub fn stain_at(&self, pixel_index: usize, stain: usize) -> f64 {
        self.conc[pixel_index * 2 + stain]
    }
}

/// Macenko estimation parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MacenkoConfig {
    /// Pixels with total OD (sum of the three channels) at or below this are
    /// treated as background.
    pub od_threshold: f64,
    /// Extreme-angle percentile for the stain directions.
    pub angle_percentile: f64,
    /// Percentile of per-stain concentrations stored as the maximum.
    pub conc_percentile: f64,
    /// Minimum number of tissue pixels required for estimation.
    pub min_tissue_pixels: usize,
}

impl Default for MacenkoConfig {
    fn default() -> Self {
        Self {
            od_threshold: 0.15,
            angle_percentile: 1.0,
            conc_percentile: 99.0,
            min_tissue_pixels: 100,
        }
    }
}

/// Stain augmentation parameters.
///
/// Each variant draws, per stain, a multiplicative factor
/// `α ~ U(1−σα, 1+σα)` and an additive shift `β ~ U(−σβ, σβ)` from a stream
/// determined by `(seed, variant_index)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentParams {
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub variants_per_image: usize,
    pub seed: u64,
    /// Pixels whose total OD is below this pass through unchanged, keeping
    /// the slide background untinted.
    pub background_od_threshold: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            sigma_alpha: 0.2,
            sigma_beta: 0.2,
            variants_per_image: 10,
            seed: 0,
            background_od_threshold: 0.15,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn od_of_white_is_zero() {
        let img = RgbImage::from_pixel(2, 1, image::Rgb([255, 255, 255]));
        let od = rgb_to_od(&img);
        assert_eq!(od.pixel(0, 0), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn od_at_clamp_floor() {
        // channel values 0 and 1 both map to -log10(1/255) = log10(255)
        let expected = 255f64.log10();
        assert!((channel_to_od(0) - expected).abs() < 1e-12);
        assert!((channel_to_od(1) - expected).abs() < 1e-12);
        assert!((expected - 2.406540).abs() < 1e-6);
    }

    #[test]
    fn od_hand_computed_pixel() {
        let img = RgbImage::from_pixel(1, 1, image::Rgb([26, 128, 255]));
        let od = rgb_to_od(&img);
        let [r, g, b] = od.pixel(0, 0);
        // -log10(26/255), -log10(128/255), -log10(255/255)
        assert!((r - 0.9915668).abs() < 1e-6, "r = {r}");
        assert!((g - 0.2993302).abs() < 1e-6, "g = {g}");
        assert_eq!(b, 0.0);
    }

    #[test]
    fn od_to_rgb_cases() {
        let od = OdImage::from_pixels(1, 1, vec![0.0, 1.0, 2.0]);
        let img = od_to_rgb(&od);
        let p = img.get_pixel(0, 0);
        assert_eq!(p.0[0], 255);
        assert_eq!(p.0[1], 26); // 25.5 rounds away from zero
        assert_eq!(p.0[2], 3); // 2.55 rounds to 3
    }

    #[test]
    fn round_trip_all_channel_values() {
        // od_to_rgb ∘ rgb_to_od within one step, exhaustively
        for v in 0u16..=255 {
            let v = v as u8;
            let back = od_to_channel(channel_to_od(v));
            assert!(
                (back as i16 - v as i16).abs() <= 1,
                "value {v} came back as {back}"
            );
            if v >= 1 {
                assert_eq!(back, v, "values >= 1 round-trip exactly");
            }
        }
    }

    #[test]
    fn od_monotone_decreasing_per_channel() {
        for v in 1u8..=255 {
            assert!(channel_to_od(v) < channel_to_od(v - 1) + 1e-15);
        }
    }

    #[test]
    fn model_text_round_trip() {
        let model = StainModel {
            stain_vectors: [[0.65, 0.704, 0.286], [0.072, 0.99, 0.105]],
            max_concentrations: [1.5, 0.9375],
        };
        let mut buf = Vec::new();
        model.write_text(&mut buf).unwrap();
        let back = StainModel::read_text(&buf[..]).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn model_text_rejects_garbage() {
        let bad = b"hematoxylin 0.1 0.2\n";
        assert!(matches!(
            StainModel::read_text(&bad[..]),
            Err(StainError::MalformedModel(_))
        ));
    }

    #[test]
    fn validate_enforces_invariants() {
        let ok = StainModel {
            stain_vectors: [normalize([0.65, 0.704, 0.286]), normalize([0.072, 0.99, 0.105])],
            max_concentrations: [1.0, 1.0],
        };
        ok.validate().unwrap();

        let mut not_unit = ok.clone();
        not_unit.stain_vectors[0] = [0.65, 0.704, 0.286];
        assert!(not_unit.validate().is_err());

        let mut collinear = ok.clone();
        collinear.stain_vectors[1] = collinear.stain_vectors[0];
        assert!(collinear.validate().is_err());

        let mut swapped = ok.clone();
        swapped.stain_vectors.swap(0, 1);
        assert!(swapped.validate().is_err(), "ordering convention violated");
    }

    fn normalize(v: [f64; 3]) -> [f64; 3] {
        let n = dot3(&v, &v).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    }
}
