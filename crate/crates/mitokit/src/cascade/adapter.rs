//! Subprocess adapter protocol.
//!
//! External detectors and classifiers are ordinary programs invoked as
//!
//! ```text
//! <command and args> --manifest <path> --out <path>
//! ```
//!
//! exchanging files with the orchestrator:
//!
//! - **Stage 1 (detector).** The manifest is a CSV with header
//!   `patch_id,file,origin_x,origin_y,valid_w,valid_h`; `file` is a PNG
//!   patch name relative to the manifest's directory. The adapter writes
//!   JSON Lines to `--out`, one box per line with keys
//!   `patch_id, x1, y1, x2, y2, score, label` in patch-local coordinates.
//! - **Stage 2 (classifier).** The manifest is a CSV with header
//!   `box_id,file` naming PNG crops; the output is JSON Lines with keys
//!   `box_id, score`, exactly one line per crop.
//!
//! A nonzero exit status, malformed output, or a contract violation (bad
//! coordinates, score outside `[0, 1]`, unknown or duplicate ids, wrong
//! line count) is an [`CascadeError::AdapterFailure`] naming the offending
//! line. Stderr is captured and carried into the run manifest either way.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::{CascadeError, SourceImage};
use crate::ensemble::{DetectionBox, DetectionSet};
use crate::refdetect::BlobParams;
use crate::stain::MacenkoConfig;
use crate::tiling::PatchGrid;
use crate::RgbImage;

/// Stage-1 detector slot.
#[derive(Debug, Clone)]
pub enum DetectorAdapter {
    /// In-process hematoxylin blob detector.
    BuiltinBlob {
        blob: BlobParams,
        macenko: MacenkoConfig,
    },
    /// External program plus leading arguments.
    External { command: Vec<String> },
}

impl DetectorAdapter {
    /// Parse an adapter spec string: `builtin:blob` or
    /// `external:<command and args>` (whitespace-separated).
    pub fn parse_spec(
        spec: &str,
        blob: &BlobParams,
        macenko: &MacenkoConfig,
    ) -> Result<Self, CascadeError> {
        if spec == "builtin:blob" {
            return Ok(Self::BuiltinBlob {
                blob: *blob,
                macenko: *macenko,
            });
        }
        if let Some(rest) = spec.strip_prefix("external:") {
            let command: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
            if command.is_empty() {
                return Err(CascadeError::Config(format!("empty external command: {spec:?}")));
            }
            return Ok(Self::External { command });
        }
        Err(CascadeError::Config(format!(
            "unknown detector adapter {spec:?}; expected builtin:blob or external:<command>"
        )))
    }
}

/// Stage-2 classifier slot.
#[derive(Debug, Clone)]
pub enum ClassifierAdapter {
    /// Scores every crop 1.0, reducing the cascade to stage 1.
    Passthrough,
    /// Scores each crop by its mean darkness.
    BuiltinDarkness,
    External { command: Vec<String> },
}

impl ClassifierAdapter {
    /// Parse an adapter spec string: `passthrough`, `builtin:darkness` or
    /// `external:<command and args>`.
    pub fn parse_spec(spec: &str) -> Result<Self, CascadeError> {
        match spec {
            "passthrough" => Ok(Self::Passthrough),
            "builtin:darkness" => Ok(Self::BuiltinDarkness),
            _ => {
                if let Some(rest) = spec.strip_prefix("external:") {
                    let command: Vec<String> =
                        rest.split_whitespace().map(str::to_string).collect();
                    if command.is_empty() {
                        return Err(CascadeError::Config(format!(
                            "empty external command: {spec:?}"
                        )));
                    }
                    Ok(Self::External { command })
                } else {
                    Err(CascadeError::Config(format!(
                        "unknown classifier adapter {spec:?}; expected passthrough, builtin:darkness or external:<command>"
                    )))
                }
            }
        }
    }
}

/// Captured stderr of adapter invocations, keyed by stage and context.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct StderrCapture {
    pub entries: Vec<AdapterStderr>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterStderr {
    pub stage: String,
    pub context: String,
    pub stderr: String,
}

impl StderrCapture {
    fn record(&mut self, stage: &str, context: &str, stderr: &str) {
        if !stderr.trim().is_empty() {
            self.entries.push(AdapterStderr {
                stage: stage.to_string(),
                context: context.to_string(),
                stderr: stderr.to_string(),
            });
        }
    }
}

/// Invoke `<command> --manifest <m> --out <o>`, returning captured stderr.
fn invoke(command: &[String], manifest: &Path, out: &Path) -> Result<String, CascadeError> {
    let output = Command::new(&command[0])
        .args(&command[1..])
        .arg("--manifest")
        .arg(manifest)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| CascadeError::AdapterFailure {
            message: format!("failed to spawn {:?}: {e}", command[0]),
            stderr: String::new(),
        })?;
    let stderr = String::from_utf8_lossy(&output.stderr).into_owned();
    if !output.status.success() {
        return Err(CascadeError::AdapterFailure {
            message: format!("{:?} exited with {}", command.join(" "), output.status),
            stderr,
        });
    }
    Ok(stderr)
}

#[derive(Debug, Serialize, Deserialize)]
struct Stage1Record {
    patch_id: usize,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
    label: u32,
}

/// Stage-1 manifest row, public so adapters written in Rust can reuse it.
#[derive(Debug, Serialize, Deserialize)]
pub struct PatchManifestRow {
    pub patch_id: usize,
    pub file: String,
    pub origin_x: u32,
    pub origin_y: u32,
    pub valid_w: u32,
    pub valid_h: u32,
}

/// Stage-2 manifest row.
#[derive(Debug, Serialize, Deserialize)]
pub struct CropManifestRow {
    pub box_id: usize,
    pub file: String,
}

/// Write the patches and manifest for one image, run the external detector
/// over them and read back global-coordinate detections.
pub(super) fn run_external_detector(
    src: &SourceImage,
    grid: &PatchGrid,
    command: &[String],
    work_dir: &Path,
    sink: &mut StderrCapture,
) -> Result<DetectionSet, CascadeError> {
    let dir = work_dir.join(&src.id);
    std::fs::create_dir_all(&dir)?;
    let manifest_path = dir.join("manifest.csv");
    let out_path = dir.join("detections.jsonl");

    let mut wtr = csv::Writer::from_path(&manifest_path)
        .map_err(|e| CascadeError::Config(e.to_string()))?;
    for r in &grid.patches {
        let file = format!("patch_{:05}.png", r.patch_id);
        let patch = grid.extract_patch(&src.image, r)?;
        patch.save(dir.join(&file))?;
        wtr.serialize(PatchManifestRow {
            patch_id: r.patch_id,
            file,
            origin_x: r.origin_x,
            origin_y: r.origin_y,
            valid_w: r.valid_width,
            valid_h: r.valid_height,
        })
        .map_err(|e| CascadeError::Config(e.to_string()))?;
    }
    wtr.flush()?;
    drop(wtr);

    let stderr = invoke(command, &manifest_path, &out_path)?;
    sink.record("stage1", &src.id, &stderr);

    let text = std::fs::read_to_string(&out_path).map_err(|e| CascadeError::AdapterFailure {
        message: format!("adapter wrote no output file {}: {e}", out_path.display()),
        stderr: stderr.clone(),
    })?;

    let mut set = DetectionSet::new(&src.id);
    let mut boxes_with_patch: Vec<(usize, DetectionBox)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| CascadeError::AdapterFailure {
            message: format!("output line {}: {msg}: {line}", n + 1),
            stderr: stderr.clone(),
        };
        let rec: Stage1Record =
            serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        let patch = grid
            .patches
            .get(rec.patch_id)
            .ok_or_else(|| fail(format!("unknown patch_id {}", rec.patch_id)))?;
        if ![rec.x1, rec.y1, rec.x2, rec.y2].iter().all(|v| v.is_finite()) {
            return Err(fail("non-finite coordinate".into()));
        }
        if rec.x1 >= rec.x2 || rec.y1 >= rec.y2 {
            return Err(fail("box must satisfy x1 < x2 and y1 < y2".into()));
        }
        if !(0.0..=1.0).contains(&rec.score) {
            return Err(fail(format!("score {} outside [0, 1]", rec.score)));
        }
        let (pw, ph) = (grid.patch.width as f64, grid.patch.height as f64);
        if rec.x1 < 0.0 || rec.y1 < 0.0 || rec.x2 > pw || rec.y2 > ph {
            return Err(fail(format!("box outside the {pw}x{ph} patch")));
        }
        // to global coordinates, clipped to the image (padding regions end
        // beyond the image edge); fully-padded boxes are dropped
        let b = DetectionBox {
            x1: (rec.x1 + patch.origin_x as f64).min(grid.image_width as f64),
            y1: (rec.y1 + patch.origin_y as f64).min(grid.image_height as f64),
            x2: (rec.x2 + patch.origin_x as f64).min(grid.image_width as f64),
            y2: (rec.y2 + patch.origin_y as f64).min(grid.image_height as f64),
            score: rec.score,
            model_id: 0,
            label: rec.label,
        };
        if b.x1 < b.x2 && b.y1 < b.y2 {
            boxes_with_patch.push((rec.patch_id, b));
        }
    }
    // deterministic order: by patch, preserving the adapter's line order
    boxes_with_patch.sort_by_key(|(pid, _)| *pid);
    set.boxes = boxes_with_patch.into_iter().map(|(_, b)| b).collect();
    Ok(set)
}

#[derive(Debug, Serialize, Deserialize)]
struct Stage2Record {
    box_id: usize,
    score: f64,
}

/// Write crops and their manifest, run the external classifier and read
/// back one score per crop, aligned with the input order.
pub(super) fn run_external_classifier(
    crops: &[(usize, RgbImage)],
    command: &[String],
    work_dir: &Path,
    sink: &mut StderrCapture,
) -> Result<Vec<f64>, CascadeError> {
    std::fs::create_dir_all(work_dir)?;
    let manifest_path = work_dir.join("manifest.csv");
    let out_path = work_dir.join("scores.jsonl");

    let mut wtr = csv::Writer::from_path(&manifest_path)
        .map_err(|e| CascadeError::Config(e.to_string()))?;
    for (box_id, crop) in crops {
        let file = format!("crop_{box_id:05}.png");
        crop.save(work_dir.join(&file))?;
        wtr.serialize(CropManifestRow { box_id: *box_id, file })
            .map_err(|e| CascadeError::Config(e.to_string()))?;
    }
    wtr.flush()?;
    drop(wtr);

    let stderr = invoke(command, &manifest_path, &out_path)?;
    sink.record("stage2", &work_dir.display().to_string(), &stderr);

    let text = std::fs::read_to_string(&out_path).map_err(|e| CascadeError::AdapterFailure {
        message: format!("adapter wrote no output file {}: {e}", out_path.display()),
        stderr: stderr.clone(),
    })?;

    let mut scores: std::collections::HashMap<usize, f64> = std::collections::HashMap::new();
    let mut count = 0usize;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| CascadeError::AdapterFailure {
            message: format!("output line {}: {msg}: {line}", n + 1),
            stderr: stderr.clone(),
        };
        let rec: Stage2Record =
            serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        if !rec.score.is_finite() || !(0.0..=1.0).contains(&rec.score) {
            return Err(fail(format!("score {} outside [0, 1]", rec.score)));
        }
        if !crops.iter().any(|(id, _)| *id == rec.box_id) {
            return Err(fail(format!("unknown box_id {}", rec.box_id)));
        }
        if scores.insert(rec.box_id, rec.score).is_some() {
            return Err(fail(format!("duplicate box_id {}", rec.box_id)));
        }
        count += 1;
    }
    if count != crops.len() {
        return Err(CascadeError::CountMismatch {
            expected: crops.len(),
            got: count,
        });
    }
    Ok(crops.iter().map(|(id, _)| scores[id]).collect())
}
