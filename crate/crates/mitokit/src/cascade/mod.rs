//! Two-stage pipeline orchestration.
//!
//! Stage 1 tiles each image and runs a candidate detector over the patches;
//! per-model results are fused with WBF. Stage 2 crops a fixed-size window
//! around every fused candidate, scores the crops with a classifier, and
//! the final thresholding keeps confident mitoses. Both stages are
//! pluggable: the built-in blob detector and darkness classifier run
//! in-process, while external adapters are subprocesses exchanging PNG
//! files, CSV manifests and JSON Lines (see [`adapter`] for the wire
//! contract).

pub mod adapter;
mod pipeline;

pub use adapter::{AdapterStderr, ClassifierAdapter, DetectorAdapter, StderrCapture};
pub use pipeline::{
    load_images_dir, run_pipeline, write_report_json, PipelineConfig, PipelineRunManifest,
};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{wbf_fuse, DetectionBox, DetectionSet, EnsembleError, WbfParams};
use crate::evaluate::EvalError;
use crate::refdetect::detect_in_concentrations;
use crate::stain::{deconvolve_od, estimate_stain_model, rgb_to_od, StainError};
use crate::tiling::{plan_grid, to_global, PatchShape, TilingError};
use crate::RgbImage;

#[derive(Debug, Error)]
pub enum CascadeError {
    /// External adapter misbehaved: nonzero exit, malformed output, or a
    /// wire-contract violation. Captured diagnostics ride along.
    #[error("adapter failure: {message}{}", format_stderr(.stderr))]
    AdapterFailure { message: String, stderr: String },
    #[error("classifier returned {got} scores for {expected} crops")]
    CountMismatch { expected: usize, got: usize },
    #[error("image {width}x{height} is smaller than the {crop}px crop window")]
    ImageSmallerThanCrop { width: u32, height: u32, crop: u32 },
    #[error("stage-2 scores do not align with the detection set: {0}")]
    Misaligned(String),
    #[error("no detector adapters configured")]
    EmptyModelList,
    #[error("model outputs disagree on image id: {0} vs {1}")]
    MixedImageIds(String, String),
    #[error("bad configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Stain(#[from] StainError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_stderr(stderr: &str) -> String {
    if stderr.trim().is_empty() {
        String::new()
    } else {
        format!("\nadapter stderr:\n{}", stderr.trim_end())
    }
}

/// How stage-1 and stage-2 confidences combine into the final score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// The classifier's confidence is the final score.
    #[default]
    ClassifierOnly,
    /// Final score is detector confidence × classifier confidence.
    Product,
}

/// Pipeline wiring parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CascadeConfig {
    /// Side of the square crop fed to the classifier.
    pub crop_size: u32,
    /// Boxes whose final score falls below this are dropped.
    pub final_threshold: f64,
    pub score_mode: ScoreMode,
    pub patch: PatchShape,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            crop_size: 128,
            final_threshold: 0.5,
            score_mode: ScoreMode::ClassifierOnly,
            patch: PatchShape::default(),
        }
    }
}

/// An image with the id it is known by across manifests and reports.
#[derive(Debug, Clone)]
pub struct SourceImage {
    pub id: String,
    pub image: RgbImage,
}

/// Run stage-1 candidate detection over a set of images.
///
/// Each image is tiled, the adapter runs over its patch set, and
/// patch-local boxes come back mapped to image-global coordinates in
/// `(patch_id, line order)`. `work_dir` is where the file exchange with an
/// external adapter happens; the built-in detector ignores it.
///
/// The built-in detector estimates one stain model per image; an image with
/// too little tissue yields an empty detection set rather than an error.
pub fn run_stage1(
    images: &[SourceImage],
    adapter: &DetectorAdapter,
    cfg: &CascadeConfig,
    work_dir: Option<&Path>,
    stderr_sink: &mut StderrCapture,
) -> Result<Vec<DetectionSet>, CascadeError> {
    images
        .iter()
        .map(|src| run_stage1_single(src, adapter, cfg, work_dir, stderr_sink))
        .collect()
}

fn run_stage1_single(
    src: &SourceImage,
    adapter: &DetectorAdapter,
    cfg: &CascadeConfig,
    work_dir: Option<&Path>,
    stderr_sink: &mut StderrCapture,
) -> Result<DetectionSet, CascadeError> {
    let grid = plan_grid(src.image.width(), src.image.height(), cfg.patch);
    match adapter {
        DetectorAdapter::BuiltinBlob { blob, macenko } => {
            let model = match estimate_stain_model(&src.image, macenko) {
                Ok(m) => m,
                Err(StainError::InsufficientTissue { .. }) => {
                    return Ok(DetectionSet::new(&src.id));
                }
                Err(e) => return Err(e.into()),
            };
            let mut set = DetectionSet::new(&src.id);
            for r in &grid.patches {
                let patch = grid.extract_patch(&src.image, r)?;
                let conc = deconvolve_od(&rgb_to_od(&patch), &model)?;
                let local = detect_in_concentrations(&src.id, &conc, blob);
                set.boxes
                    .extend(local.boxes.iter().map(|b| to_global(b, r)));
            }
            Ok(set)
        }
        DetectorAdapter::External { command } => {
            let dir = work_dir.ok_or_else(|| {
                CascadeError::Config("external detector adapters need a work directory".into())
            })?;
            adapter::run_external_detector(src, &grid, command, dir, stderr_sink)
        }
    }
}

/// Fuse the per-model detections of one image with WBF.
///
/// Sets must agree on the image id; boxes are re-tagged with their model's
/// position in the list and `num_models` becomes the list length.
pub fn fuse_models(
    per_model: &[DetectionSet],
    params: &WbfParams,
) -> Result<DetectionSet, CascadeError> {
    let first = per_model.first().ok_or(CascadeError::EmptyModelList)?;
    let mut merged = DetectionSet::new(&first.image_id);
    merged.num_models = per_model.len();
    for (model_id, set) in per_model.iter().enumerate() {
        if set.image_id != first.image_id {
            return Err(CascadeError::MixedImageIds(
                first.image_id.clone(),
                set.image_id.clone(),
            ));
        }
        merged.boxes.extend(set.boxes.iter().map(|b| DetectionBox {
            model_id,
            ..*b
        }));
    }
    Ok(wbf_fuse(&merged, params))
}

/// Cut a square window around every detection's center, shifted (never
/// shrunk or padded) to stay inside the image. Returned in detection order
/// as `(box index, crop)` pairs.
pub fn extract_crops(
    img: &RgbImage,
    dets: &DetectionSet,
    crop_size: u32,
) -> Result<Vec<(usize, RgbImage)>, CascadeError> {
    if img.width() < crop_size || img.height() < crop_size {
        return Err(CascadeError::ImageSmallerThanCrop {
            width: img.width(),
            height: img.height(),
            crop: crop_size,
        });
    }
    let mut out = Vec::with_capacity(dets.boxes.len());
    for (i, b) in dets.boxes.iter().enumerate() {
        let (cx, cy) = b.center();
        let ox = (cx - crop_size as f64 / 2.0)
            .floor()
            .clamp(0.0, (img.width() - crop_size) as f64) as u32;
        let oy = (cy - crop_size as f64 / 2.0)
            .floor()
            .clamp(0.0, (img.height() - crop_size) as f64) as u32;
        let crop = image::imageops::crop_imm(img, ox, oy, crop_size, crop_size).to_image();
        out.push((i, crop));
    }
    Ok(out)
}

/// Score crops with the classifier adapter, one confidence per crop,
/// aligned with the input order by box id.
pub fn run_stage2(
    crops: &[(usize, RgbImage)],
    adapter: &ClassifierAdapter,
    work_dir: Option<&Path>,
    stderr_sink: &mut StderrCapture,
) -> Result<Vec<f64>, CascadeError> {
    match adapter {
        ClassifierAdapter::Passthrough => Ok(vec![1.0; crops.len()]),
        ClassifierAdapter::BuiltinDarkness => Ok(crops
            .iter()
            .map(|(_, crop)| mean_darkness(crop))
            .collect()),
        ClassifierAdapter::External { command } => {
            let dir = work_dir.ok_or_else(|| {
                CascadeError::Config("external classifier adapters need a work directory".into())
            })?;
            adapter::run_external_classifier(crops, command, dir, stderr_sink)
        }
    }
}

/// Mean darkness of a crop: `1 − mean(channel) / 255`, in `[0, 1]`.
pub fn mean_darkness(img: &RgbImage) -> f64 {
    let raw = img.as_raw();
    if raw.is_empty() {
        return 0.0;
    }
    let sum: u64 = raw.iter().map(|&v| v as u64).sum();
    1.0 - (sum as f64 / raw.len() as f64) / 255.0
}

/// Apply stage-2 scores and the final threshold.
///
/// Scores must align one-to-one with `dets.boxes`. The kept boxes carry
/// their final score and come back sorted by descending score.
pub fn finalize(
    dets: &DetectionSet,
    stage2_scores: &[f64],
    cfg: &CascadeConfig,
) -> Result<DetectionSet, CascadeError> {
    if stage2_scores.len() != dets.boxes.len() {
        return Err(CascadeError::CountMismatch {
            expected: dets.boxes.len(),
            got: stage2_scores.len(),
        });
    }
    let mut out = DetectionSet::new(&dets.image_id);
    out.num_models = dets.num_models;
    for (b, &s2) in dets.boxes.iter().zip(stage2_scores) {
        let score = match cfg.score_mode {
            ScoreMode::ClassifierOnly => s2,
            ScoreMode::Product => b.score * s2,
        };
        if score >= cfg.final_threshold {
            out.boxes.push(DetectionBox { score, ..*b });
        }
    }
    out.boxes.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.x1.total_cmp(&b.x1))
            .then(a.y1.total_cmp(&b.y1))
            .then(a.x2.total_cmp(&b.x2))
            .then(a.y2.total_cmp(&b.y2))
    });
    Ok(out)
}
