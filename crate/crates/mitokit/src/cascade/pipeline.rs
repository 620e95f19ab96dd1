//! End-to-end pipeline runs and their on-disk manifest.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adapter::{ClassifierAdapter, DetectorAdapter, StderrCapture};
use super::{
    extract_crops, finalize, fuse_models, run_stage1, run_stage2, CascadeConfig, CascadeError,
    SourceImage,
};
use crate::ensemble::{write_detections_file, DetectionSet, WbfParams};
use crate::evaluate::{evaluate_detections, EvalReport, MatchConfig};
use crate::refdetect::BlobParams;
use crate::stain::MacenkoConfig;
use crate::tiling::{plan_grid, AnnotationLabel, PointAnnotation};

/// Full configuration of a pipeline run. Serializes to/from TOML for the
/// `pipeline` subcommand and is echoed into every run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Root seed; all stochastic subsystems derive their streams from it.
    pub seed: u64,
    /// Stage-1 adapter specs, one per ensemble model.
    pub detectors: Vec<String>,
    /// Stage-2 adapter spec.
    pub classifier: String,
    /// Parameters of the built-in blob detector.
    pub blob: BlobParams,
    /// Stain estimation parameters used by the built-in detector.
    pub macenko: MacenkoConfig,
    pub wbf: WbfParams,
    pub cascade: CascadeConfig,
    pub eval: MatchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            detectors: vec!["builtin:blob".to_string()],
            classifier: "passthrough".to_string(),
            blob: BlobParams::default(),
            macenko: MacenkoConfig::default(),
            wbf: WbfParams::default(),
            cascade: CascadeConfig::default(),
            eval: MatchConfig::default(),
        }
    }
}

/// Record of one pipeline run: the effective configuration and every file
/// the run produced, with paths relative to the run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineRunManifest {
    pub seed: u64,
    pub config: PipelineConfig,
    pub images: Vec<String>,
    pub grid_files: Vec<String>,
    pub stage1_files: Vec<String>,
    pub fused_file: String,
    pub stage2_scores_file: String,
    pub final_file: String,
    pub report_json_file: Option<String>,
    pub report_text_file: Option<String>,
    pub adapter_stderr: StderrCapture,
}

impl PipelineRunManifest {
    pub fn write_file(&self, path: &Path) -> Result<(), CascadeError> {
        let mut f = std::fs::File::create(path)?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CascadeError::Config(e.to_string()))?;
        f.write_all(json.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, CascadeError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CascadeError::Config(e.to_string()))
    }

    /// Every file the manifest references, relative to the run directory.
    pub fn referenced_files(&self) -> Vec<&str> {
        let mut files: Vec<&str> = Vec::new();
        files.extend(self.grid_files.iter().map(String::as_str));
        files.extend(self.stage1_files.iter().map(String::as_str));
        files.push(&self.fused_file);
        files.push(&self.stage2_scores_file);
        files.push(&self.final_file);
        if let Some(f) = &self.report_json_file {
            files.push(f);
        }
        if let Some(f) = &self.report_text_file {
            files.push(f);
        }
        files
    }
}

#[derive(Debug, Serialize)]
struct Stage2ScoreRecord<'a> {
    image_id: &'a str,
    box_id: usize,
    score: f64,
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned()
}

/// Run the full two-stage pipeline and persist every intermediate product.
///
/// For each image: tile, run every stage-1 detector, fuse the per-model
/// boxes with WBF, crop around the fused candidates, score the crops with
/// the stage-2 classifier and keep boxes above the final threshold. When
/// ground truth is given, mitosis-labelled points are matched against the
/// final boxes and a report is written next to the detections.
///
/// Returns the manifest, which is also written to `manifest.json` in
/// `run_dir`.
pub fn run_pipeline(
    images: &[SourceImage],
    truth: Option<&[PointAnnotation]>,
    config: &PipelineConfig,
    run_dir: &Path,
) -> Result<PipelineRunManifest, CascadeError> {
    if config.detectors.is_empty() {
        return Err(CascadeError::EmptyModelList);
    }
    let detectors: Vec<DetectorAdapter> = config
        .detectors
        .iter()
        .map(|s| DetectorAdapter::parse_spec(s, &config.blob, &config.macenko))
        .collect::<Result<_, _>>()?;
    let classifier = ClassifierAdapter::parse_spec(&config.classifier)?;

    std::fs::create_dir_all(run_dir)?;
    let grids_dir = run_dir.join("grids");
    let stage1_dir = run_dir.join("stage1");
    let crops_dir = run_dir.join("crops");
    std::fs::create_dir_all(&grids_dir)?;
    std::fs::create_dir_all(&stage1_dir)?;

    let mut stderr_sink = StderrCapture::default();

    // tiling plans
    let mut grid_files = Vec::new();
    for src in images {
        let grid = plan_grid(src.image.width(), src.image.height(), config.cascade.patch);
        let path = grids_dir.join(format!("{}.grid.txt", src.id));
        grid.write_manifest_file(&path)?;
        grid_files.push(rel(&path, run_dir));
    }

    // stage 1, one detection file per model
    let mut per_model: Vec<Vec<DetectionSet>> = Vec::new();
    let mut stage1_files = Vec::new();
    for (k, adapter) in detectors.iter().enumerate() {
        let work = stage1_dir.join(format!("model_{k}"));
        let sets = run_stage1(
            images,
            adapter,
            &config.cascade,
            Some(&work),
            &mut stderr_sink,
        )?;
        let path = stage1_dir.join(format!("model_{k}.jsonl"));
        write_detections_file(&sets, &path)?;
        stage1_files.push(rel(&path, run_dir));
        per_model.push(sets);
    }

    // WBF across models, per image
    let mut fused: Vec<DetectionSet> = Vec::new();
    for (i, _src) in images.iter().enumerate() {
        let sets_for_image: Vec<DetectionSet> =
            per_model.iter().map(|m| m[i].clone()).collect();
        fused.push(fuse_models(&sets_for_image, &config.wbf)?);
    }
    let fused_path = run_dir.join("fused.jsonl");
    write_detections_file(&fused, &fused_path)?;

    // stage 2 + finalize
    let mut final_sets: Vec<DetectionSet> = Vec::new();
    let scores_path = run_dir.join("stage2_scores.jsonl");
    let mut scores_file = std::io::BufWriter::new(std::fs::File::create(&scores_path)?);
    for (src, fused_set) in images.iter().zip(&fused) {
        let crops = extract_crops(&src.image, fused_set, config.cascade.crop_size)?;
        let work = crops_dir.join(&src.id);
        let scores = run_stage2(&crops, &classifier, Some(&work), &mut stderr_sink)?;
        for ((box_id, _), &score) in crops.iter().zip(&scores) {
            let rec = Stage2ScoreRecord {
                image_id: &src.id,
                box_id: *box_id,
                score,
            };
            serde_json::to_writer(&mut scores_file, &rec)
                .map_err(|e| CascadeError::Config(e.to_string()))?;
            writeln!(scores_file)?;
        }
        final_sets.push(finalize(fused_set, &scores, &config.cascade)?);
    }
    scores_file.flush()?;
    drop(scores_file);
    let final_path = run_dir.join("final.jsonl");
    write_detections_file(&final_sets, &final_path)?;

    // evaluation against mitosis-labelled truth points
    let (report_json_file, report_text_file) = match truth {
        Some(truth) => {
            let mitoses: Vec<PointAnnotation> = truth
                .iter()
                .filter(|t| t.label == AnnotationLabel::Mitosis)
                .cloned()
                .collect();
            let report = evaluate_detections(&final_sets, &mitoses, &config.eval)?;
            let json_path = run_dir.join("report.json");
            write_report_json(&report, &json_path)?;
            let text_path = run_dir.join("report.txt");
            let mut tf = std::fs::File::create(&text_path)?;
            report.write_table(&mut tf, "two-step pipeline")?;
            (Some(rel(&json_path, run_dir)), Some(rel(&text_path, run_dir)))
        }
        None => (None, None),
    };

    let manifest = PipelineRunManifest {
        seed: config.seed,
        config: config.clone(),
        images: images.iter().map(|s| s.id.clone()).collect(),
        grid_files,
        stage1_files,
        fused_file: rel(&fused_path, run_dir),
        stage2_scores_file: rel(&scores_path, run_dir),
        final_file: rel(&final_path, run_dir),
        report_json_file,
        report_text_file,
        adapter_stderr: stderr_sink,
    };
    manifest.write_file(&run_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Write an evaluation report as pretty JSON.
pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<(), CascadeError> {
    let mut f = std::fs::File::create(path)?;
    let json =
        serde_json::to_string_pretty(report).map_err(|e| CascadeError::Config(e.to_string()))?;
    f.write_all(json.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Convenience for tests and examples: load every `.png` in a directory as
/// a source image, id = file stem, sorted by id.
pub fn load_images_dir(dir: &Path) -> Result<Vec<SourceImage>, CascadeError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CascadeError::Config(format!("bad file name {}", path.display())))?
            .to_string();
        let image = image::open(&path)?.to_rgb8();
        out.push(SourceImage { id, image });
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}
