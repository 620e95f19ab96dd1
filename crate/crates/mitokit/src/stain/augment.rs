//! Stochastic stain augmentation: perturb per-stain concentrations and
//! re-render, leaving the slide background untouched.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::macenko::ConcentrationSolver;
use super::{od_to_channel, rgb_to_od, AugmentParams, MacenkoConfig, StainError, StainModel};
use crate::RgbImage;

/// Perturbation drawn for one variant: per-stain multiplicative factors and
/// additive shifts, in hematoxylin/eosin order.
///
/// The stream is a ChaCha cipher keyed by the seed with the variant index as
/// the stream number, so variants are independent and reproducible without
/// drawing them in sequence.
pub fn perturbation_for_variant(params: &AugmentParams, variant_index: usize) -> ([f64; 2], [f64; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(variant_index as u64);
    let mut alpha = [1.0; 2];
    let mut beta = [0.0; 2];
    for s in 0..2 {
        let ua: f64 = rng.random_range(-1.0..=1.0);
        let ub: f64 = rng.random_range(-1.0..=1.0);
        alpha[s] = 1.0 + params.sigma_alpha * ua;
        beta[s] = params.sigma_beta * ub;
    }
    (alpha, beta)
}

/// Render one stain-shifted variant of an image.
///
/// Tissue pixels are deconvolved against `model`, their concentrations
/// scaled and shifted by the variant's perturbation (clamped non-negative)
/// and recomposed; background pixels (total OD below the configured
/// threshold) are copied through byte for byte.
pub fn augment(
    img: &RgbImage,
    model: &StainModel,
    params: &AugmentParams,
    variant_index: usize,
) -> Result<RgbImage, StainError> {
    let (alpha, beta) = perturbation_for_variant(params, variant_index);
    let solver = ConcentrationSolver::new(model)?;
    let od = rgb_to_od(img);
    let hv = model.stain_vectors[0];
    let ev = model.stain_vectors[1];

    let mut out = Vec::with_capacity(img.as_raw().len());
    for (src, od_pix) in img.pixels().zip(od.pixels()) {
        let total = od_pix[0] + od_pix[1] + od_pix[2];
        if total < params.background_od_threshold {
            out.extend_from_slice(&src.0);
            continue;
        }
        let [ch, ce] = solver.solve(od_pix);
        let ch = (ch * alpha[0] + beta[0]).max(0.0);
        let ce = (ce * alpha[1] + beta[1]).max(0.0);
        for c in 0..3 {
            let od_new = ch * hv[c] + ce * ev[c];
            out.push(od_to_channel(od_new));
        }
    }
    Ok(RgbImage::from_raw(img.width(), img.height(), out).expect("buffer sized from dimensions"))
}

/// Generate `params.variants_per_image` stain-shifted variants.
///
/// The stain model is estimated once from the source image with default
/// Macenko parameters; variants are indexed `0..n` and independent, so the
/// list is deterministic in `(image, params)`.
pub fn generate_variants(img: &RgbImage, params: &AugmentParams) -> Result<Vec<RgbImage>, StainError> {
    let model = super::estimate_stain_model(img, &MacenkoConfig::default())?;
    (0..params.variants_per_image)
        .into_par_iter()
        .map(|i| augment(img, &model, params, i))
        .collect()
}
