//! Command-line surface binding the modules into the full workflow.
//!
//! One subcommand per pipeline step (`augment`, `tile`, `folds`, `detect`,
//! `fuse`, `classify`, `evaluate`, `pipeline`, `schedule-dump`) plus the two
//! reference adapters (`adapter-detect`, `adapter-classify`) that speak the
//! external wire protocol, so any stage can also run as a subprocess.
//!
//! Values resolve as: explicit flag, then `--config` file, then default.
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 adapter failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{
    self, extract_crops, finalize, fuse_models, run_stage2, CascadeConfig, CascadeError,
    ClassifierAdapter, DetectorAdapter, PipelineConfig, ScoreMode, SourceImage, StderrCapture,
};
use crate::ensemble::{read_detections_file, write_detections_file, DetectionSet, WbfParams};
use crate::evaluate::{evaluate_detections, MatchConfig};
use crate::folds;
use crate::refdetect::{detect_in_concentrations, BlobParams};
use crate::stain::{
    deconvolve_od, estimate_stain_model_pooled, generate_variants, rgb_to_od, AugmentParams,
    MacenkoConfig, StainError,
};
use crate::tiling::{plan_grid, read_annotations_file, AnnotationLabel, PatchShape};
use crate::trainctl::CyclicalLrConfig;

/// Derive a subsystem seed from the root seed, so partial re-runs reproduce
/// without sharing streams across subsystems. FNV-1a over the label.
pub fn subsystem_seed(root: u64, subsystem: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ root;
    for b in subsystem.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Adapter(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Adapter(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Adapter(m) => m,
        }
    }
}

impl From<CascadeError> for CliError {
    fn from(e: CascadeError) -> Self {
        match e {
            CascadeError::AdapterFailure { .. } | CascadeError::CountMismatch { .. } => {
                CliError::Adapter(e.to_string())
            }
            CascadeError::Config(_) | CascadeError::EmptyModelList => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<StainError> for CliError {
    fn from(e: StainError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::tiling::TilingError> for CliError {
    fn from(e: crate::tiling::TilingError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::ensemble::EnsembleError> for CliError {
    fn from(e: crate::ensemble::EnsembleError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::evaluate::EvalError> for CliError {
    fn from(e: crate::evaluate::EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<folds::FoldError> for CliError {
    fn from(e: folds::FoldError) -> Self {
        match e {
            folds::FoldError::BadK(_) | folds::FoldError::BadFoldIndex { .. } => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Optional config file: the pipeline configuration plus augmentation
/// parameters and default input/output locations.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub detectors: Option<Vec<String>>,
    pub classifier: Option<String>,
    pub augment: Option<AugmentParams>,
    pub blob: Option<BlobParams>,
    pub macenko: Option<MacenkoConfig>,
    pub wbf: Option<WbfParams>,
    pub cascade: Option<CascadeConfig>,
    pub eval: Option<MatchConfig>,
    pub input: InputSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InputSection {
    pub images_dir: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

impl FileConfig {
    fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    fn pipeline_config(&self, seed: u64) -> PipelineConfig {
        let defaults = PipelineConfig::default();
        PipelineConfig {
            seed,
            detectors: self.detectors.clone().unwrap_or(defaults.detectors),
            classifier: self.classifier.clone().unwrap_or(defaults.classifier),
            blob: self.blob.unwrap_or(defaults.blob),
            macenko: self.macenko.unwrap_or(defaults.macenko),
            wbf: self.wbf.unwrap_or(defaults.wbf),
            cascade: self.cascade.unwrap_or(defaults.cascade),
            eval: self.eval.unwrap_or(defaults.eval),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "mitokit",
    version,
    about = "Deterministic scaffolding for two-stage mitosis detection pipelines"
)]
struct Cli {
    /// Root seed; subsystems derive their own streams from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image and per-patch parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML config file; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate stain-shifted variants of every PNG in a directory.
    Augment(AugmentArgs),
    /// Split one image into padded patches plus manifests.
    Tile(TileArgs),
    /// Assign image ids to k folds deterministically.
    Folds(FoldsArgs),
    /// Run a stage-1 detector adapter over a directory of images.
    Detect(DetectArgs),
    /// Fuse per-model detection files with Weighted Boxes Fusion.
    Fuse(FuseArgs),
    /// Run the stage-2 classifier over detections and apply the threshold.
    Classify(ClassifyArgs),
    /// Match detections against truth points and report P/R/F1.
    Evaluate(EvaluateArgs),
    /// Run the full two-stage pipeline from a config file.
    Pipeline(PipelineArgs),
    /// Dump the cyclical learning-rate schedule as iteration,lr CSV.
    ScheduleDump(ScheduleDumpArgs),
    /// Reference stage-1 adapter: blob detection over a patch manifest.
    AdapterDetect(AdapterDetectArgs),
    /// Reference stage-2 adapter: darkness scoring over a crop manifest.
    AdapterClassify(AdapterClassifyArgs),
}

#[derive(Args, Debug)]
struct AugmentArgs {
    /// Directory of input PNGs.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for variants, named <stem>_augN.png.
    #[arg(long)]
    out: PathBuf,
    /// Variants per image.
    #[arg(long)]
    variants: Option<usize>,
    #[arg(long)]
    sigma_alpha: Option<f64>,
    #[arg(long)]
    sigma_beta: Option<f64>,
}

#[derive(Args, Debug)]
struct TileArgs {
    /// Input PNG.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for patches, grid.txt and manifest.csv.
    #[arg(long)]
    out: PathBuf,
    /// Patch shape as HEIGHTxWIDTH (rows by columns).
    #[arg(long)]
    patch: Option<String>,
}

#[derive(Args, Debug)]
struct FoldsArgs {
    /// Text file with one image id per line.
    #[arg(long)]
    ids: PathBuf,
    /// Number of folds.
    #[arg(long)]
    k: Option<usize>,
    /// Output CSV (image_id,fold).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// Detector adapter spec: builtin:blob or external:<command>.
    #[arg(long)]
    adapter: Option<String>,
    /// Directory of input PNGs.
    #[arg(long)]
    images: PathBuf,
    /// Output detection JSONL.
    #[arg(long)]
    out: PathBuf,
    /// Patch shape as HEIGHTxWIDTH.
    #[arg(long)]
    patch: Option<String>,
    /// Work directory for external adapters (default: <out>.work).
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[command(flatten)]
    blob: BlobFlags,
}

#[derive(Args, Debug)]
struct BlobFlags {
    #[arg(long)]
    conc_threshold: Option<f64>,
    #[arg(long)]
    min_area: Option<usize>,
    #[arg(long)]
    max_area: Option<usize>,
    #[arg(long)]
    score_scale: Option<f64>,
}

impl BlobFlags {
    fn apply(&self, base: BlobParams) -> BlobParams {
        BlobParams {
            conc_threshold: self.conc_threshold.unwrap_or(base.conc_threshold),
            min_area: self.min_area.unwrap_or(base.min_area),
            max_area: self.max_area.unwrap_or(base.max_area),
            score_scale: self.score_scale.unwrap_or(base.score_scale),
        }
    }
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Detection JSONL files, one per model.
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Output fused JSONL.
    #[arg(long)]
    out: PathBuf,
    /// IoU threshold for clustering.
    #[arg(long)]
    iou: Option<f64>,
    /// Drop boxes below this score before fusing.
    #[arg(long)]
    score_threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    /// Classifier adapter spec: passthrough, builtin:darkness or external:<command>.
    #[arg(long)]
    adapter: Option<String>,
    /// Fused detection JSONL from stage 1.
    #[arg(long)]
    dets: PathBuf,
    /// Directory with the source PNGs the detections refer to.
    #[arg(long)]
    images: PathBuf,
    /// Output final detection JSONL.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    crop_size: Option<u32>,
    #[arg(long)]
    final_threshold: Option<f64>,
    /// classifier_only or product.
    #[arg(long)]
    score_mode: Option<String>,
    /// Work directory for external adapters (default: <out>.work).
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Detection JSONL.
    #[arg(long)]
    dets: PathBuf,
    /// Truth CSV (image_id,x,y,label); only mitosis rows count.
    #[arg(long)]
    truth: PathBuf,
    /// Match radius in pixels.
    #[arg(long)]
    radius: Option<f64>,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the text table here (also printed to stdout).
    #[arg(long)]
    text: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Directory of input PNGs (overrides [input].images_dir).
    #[arg(long)]
    images: Option<PathBuf>,
    /// Truth CSV (overrides [input].truth).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Run directory (overrides [output].dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScheduleDumpArgs {
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    base_lr: Option<f64>,
    /// Iterations per half-cycle.
    #[arg(long)]
    step_size: Option<u64>,
    /// How many iterations to dump.
    #[arg(long)]
    iterations: u64,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AdapterDetectArgs {
    /// Patch manifest CSV (patch_id,file,origin_x,origin_y,valid_w,valid_h).
    #[arg(long)]
    manifest: PathBuf,
    /// Output JSONL with patch-local boxes.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    blob: BlobFlags,
}

#[derive(Args, Debug)]
struct AdapterClassifyArgs {
    /// Crop manifest CSV (box_id,file).
    #[arg(long)]
    manifest: PathBuf,
    /// Output JSONL with box_id,score lines.
    #[arg(long)]
    out: PathBuf,
}

/// Entry point of the `mitokit` binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are successes, not usage errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };

    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    if let Some(threads) = cli.threads.or(config.threads) {
        // a pre-existing global pool (e.g. in tests) is fine
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    match cli.command {
        Command::Augment(args) => cmd_augment(args, &config, seed),
        Command::Tile(args) => cmd_tile(args),
        Command::Folds(args) => cmd_folds(args, seed),
        Command::Detect(args) => cmd_detect(args, &config),
        Command::Fuse(args) => cmd_fuse(args, &config),
        Command::Classify(args) => cmd_classify(args, &config),
        Command::Evaluate(args) => cmd_evaluate(args, &config),
        Command::Pipeline(args) => cmd_pipeline(args, &config, seed),
        Command::ScheduleDump(args) => cmd_schedule_dump(args),
        Command::AdapterDetect(args) => cmd_adapter_detect(args, &config),
        Command::AdapterClassify(args) => cmd_adapter_classify(args),
    }
}

/// Parse HEIGHTxWIDTH, the row-by-column convention of patch sizes.
fn parse_patch_shape(s: &str) -> Result<PatchShape, CliError> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| CliError::Usage(format!("bad patch shape {s:?}; expected HEIGHTxWIDTH")))?;
    let height = h
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("bad patch height {h:?}")))?;
    let width = w
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("bad patch width {w:?}")))?;
    if height == 0 || width == 0 {
        return Err(CliError::Usage("patch dimensions must be >= 1".into()));
    }
    Ok(PatchShape { width, height })
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_augment(args: AugmentArgs, config: &FileConfig, seed: u64) -> Result<(), CliError> {
    let base = config.augment.unwrap_or_default();
    let params = AugmentParams {
        sigma_alpha: args.sigma_alpha.unwrap_or(base.sigma_alpha),
        sigma_beta: args.sigma_beta.unwrap_or(base.sigma_beta),
        variants_per_image: args.variants.unwrap_or(base.variants_per_image),
        seed: subsystem_seed(seed, "augment"),
        background_od_threshold: base.background_od_threshold,
    };
    let files = png_files(&args.input)?;
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "no .png files in {}",
            args.input.display()
        )));
    }
    std::fs::create_dir_all(&args.out)?;

    let results: Vec<(PathBuf, Result<usize, String>)> = files
        .par_iter()
        .map(|path| {
            let outcome = (|| -> Result<usize, String> {
                let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
                let variants = generate_variants(&img, &params).map_err(|e| e.to_string())?;
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| "bad file name".to_string())?;
                for (i, v) in variants.iter().enumerate() {
                    v.save(args.out.join(format!("{stem}_aug{i}.png")))
                        .map_err(|e| e.to_string())?;
                }
                Ok(variants.len())
            })();
            (path.clone(), outcome)
        })
        .collect();

    let mut total = 0usize;
    let mut failures = 0usize;
    for (path, outcome) in &results {
        match outcome {
            Ok(n) => total += n,
            Err(msg) => {
                failures += 1;
                eprintln!("error: {}: {msg}", path.display());
            }
        }
    }
    println!(
        "wrote {total} variants for {} images into {}",
        results.len() - failures,
        args.out.display()
    );
    if failures > 0 {
        return Err(CliError::Data(format!("{failures} images failed")));
    }
    Ok(())
}

fn cmd_tile(args: TileArgs) -> Result<(), CliError> {
    let patch = match &args.patch {
        Some(s) => parse_patch_shape(s)?,
        None => PatchShape::default(),
    };
    let img = image::open(&args.input)?.to_rgb8();
    let grid = plan_grid(img.width(), img.height(), patch);
    std::fs::create_dir_all(&args.out)?;
    grid.write_manifest_file(&args.out.join("grid.txt"))?;

    let mut wtr = csv::Writer::from_path(args.out.join("manifest.csv"))
        .map_err(|e| CliError::Data(e.to_string()))?;
    for r in &grid.patches {
        let file = format!("patch_{:05}.png", r.patch_id);
        let patch_img = grid.extract_patch(&img, r)?;
        patch_img.save(args.out.join(&file))?;
        wtr.serialize(cascade::adapter::PatchManifestRow {
            patch_id: r.patch_id,
            file,
            origin_x: r.origin_x,
            origin_y: r.origin_y,
            valid_w: r.valid_width,
            valid_h: r.valid_height,
        })
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    wtr.flush().map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "tiled {} into {} patches of {}x{} (rows x cols)",
        args.input.display(),
        grid.patches.len(),
        patch.height,
        patch.width
    );
    Ok(())
}

fn cmd_folds(args: FoldsArgs, seed: u64) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.ids)?;
    let ids: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let k = args.k.unwrap_or(4);
    let assignment = folds::split(&ids, k, subsystem_seed(seed, "folds"))?;
    assignment.write_csv_file(&args.out)?;
    println!(
        "assigned {} ids to {k} folds (sizes {:?})",
        ids.len(),
        assignment.fold_sizes()
    );
    Ok(())
}

fn load_source_images(dir: &Path) -> Result<Vec<SourceImage>, CliError> {
    let images = cascade::load_images_dir(dir)?;
    if images.is_empty() {
        return Err(CliError::Data(format!(
            "no .png files in {}",
            dir.display()
        )));
    }
    Ok(images)
}

fn cmd_detect(args: DetectArgs, config: &FileConfig) -> Result<(), CliError> {
    let blob = args.blob.apply(config.blob.unwrap_or_default());
    let macenko = config.macenko.unwrap_or_default();
    let spec = args
        .adapter
        .or_else(|| config.detectors.as_ref().and_then(|d| d.first().cloned()))
        .unwrap_or_else(|| "builtin:blob".to_string());
    let adapter = DetectorAdapter::parse_spec(&spec, &blob, &macenko)?;
    let mut cascade_cfg = config.cascade.unwrap_or_default();
    if let Some(p) = &args.patch {
        cascade_cfg.patch = parse_patch_shape(p)?;
    }
    let images = load_source_images(&args.images)?;
    let work_dir = args
        .work_dir
        .unwrap_or_else(|| args.out.with_extension("work"));
    let mut sink = StderrCapture::default();
    let sets = cascade::run_stage1(&images, &adapter, &cascade_cfg, Some(&work_dir), &mut sink)?;
    write_detections_file(&sets, &args.out)?;
    let n: usize = sets.iter().map(|s| s.boxes.len()).sum();
    println!("detected {n} candidates over {} images -> {}", sets.len(), args.out.display());
    for e in &sink.entries {
        eprintln!("[{} {}] {}", e.stage, e.context, e.stderr);
    }
    Ok(())
}

fn cmd_fuse(args: FuseArgs, config: &FileConfig) -> Result<(), CliError> {
    let mut params = config.wbf.unwrap_or_default();
    if let Some(iou) = args.iou {
        if !(0.0 < iou && iou < 1.0) {
            return Err(CliError::Usage(format!("--iou {iou} outside (0, 1)")));
        }
        params.iou_threshold = iou;
    }
    if let Some(t) = args.score_threshold {
        params.score_threshold = t;
    }

    // one input file per model; image ids in first-seen order
    let per_file: Vec<Vec<DetectionSet>> = args
        .inputs
        .iter()
        .map(|p| read_detections_file(p).map_err(CliError::from))
        .collect::<Result<_, _>>()?;
    let mut image_ids: Vec<String> = Vec::new();
    for sets in &per_file {
        for s in sets {
            if !image_ids.contains(&s.image_id) {
                image_ids.push(s.image_id.clone());
            }
        }
    }
    let mut fused = Vec::new();
    for id in &image_ids {
        let per_model: Vec<DetectionSet> = per_file
            .iter()
            .map(|sets| {
                sets.iter()
                    .find(|s| &s.image_id == id)
                    .cloned()
                    .unwrap_or_else(|| DetectionSet::new(id))
            })
            .collect();
        fused.push(fuse_models(&per_model, &params)?);
    }
    write_detections_file(&fused, &args.out)?;
    let n: usize = fused.iter().map(|s| s.boxes.len()).sum();
    println!(
        "fused {} model files over {} images into {n} boxes -> {}",
        args.inputs.len(),
        image_ids.len(),
        args.out.display()
    );
    Ok(())
}

fn parse_score_mode(s: &str) -> Result<ScoreMode, CliError> {
    match s {
        "classifier_only" => Ok(ScoreMode::ClassifierOnly),
        "product" => Ok(ScoreMode::Product),
        other => Err(CliError::Usage(format!(
            "bad --score-mode {other:?}; expected classifier_only or product"
        ))),
    }
}

fn cmd_classify(args: ClassifyArgs, config: &FileConfig) -> Result<(), CliError> {
    let spec = args
        .adapter
        .or_else(|| config.classifier.clone())
        .unwrap_or_else(|| "passthrough".to_string());
    let adapter = ClassifierAdapter::parse_spec(&spec)?;
    let mut cascade_cfg = config.cascade.unwrap_or_default();
    if let Some(c) = args.crop_size {
        cascade_cfg.crop_size = c;
    }
    if let Some(t) = args.final_threshold {
        cascade_cfg.final_threshold = t;
    }
    if let Some(m) = &args.score_mode {
        cascade_cfg.score_mode = parse_score_mode(m)?;
    }

    let dets = read_detections_file(&args.dets)?;
    let images = load_source_images(&args.images)?;
    let work_root = args
        .work_dir
        .unwrap_or_else(|| args.out.with_extension("work"));
    let mut sink = StderrCapture::default();
    let mut final_sets = Vec::new();
    for set in &dets {
        let src = images
            .iter()
            .find(|s| s.id == set.image_id)
            .ok_or_else(|| {
                CliError::Data(format!(
                    "detections reference image {:?} not present in {}",
                    set.image_id,
                    args.images.display()
                ))
            })?;
        let crops = extract_crops(&src.image, set, cascade_cfg.crop_size)?;
        let scores = run_stage2(&crops, &adapter, Some(&work_root.join(&set.image_id)), &mut sink)?;
        final_sets.push(finalize(set, &scores, &cascade_cfg)?);
    }
    write_detections_file(&final_sets, &args.out)?;
    let kept: usize = final_sets.iter().map(|s| s.boxes.len()).sum();
    let total: usize = dets.iter().map(|s| s.boxes.len()).sum();
    println!("kept {kept} of {total} boxes -> {}", args.out.display());
    for e in &sink.entries {
        eprintln!("[{} {}] {}", e.stage, e.context, e.stderr);
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs, config: &FileConfig) -> Result<(), CliError> {
    let mut cfg = config.eval.unwrap_or_default();
    if let Some(r) = args.radius {
        if r <= 0.0 {
            return Err(CliError::Usage(format!("--radius {r} must be > 0")));
        }
        cfg.radius = r;
    }
    let dets = read_detections_file(&args.dets)?;
    let truth: Vec<_> = read_annotations_file(&args.truth)?
        .into_iter()
        .filter(|t| t.label == AnnotationLabel::Mitosis)
        .collect();
    let report = evaluate_detections(&dets, &truth, &cfg)?;
    let mut stdout = std::io::stdout().lock();
    report
        .write_table(&mut stdout, "detections")
        .map_err(|e| CliError::Data(e.to_string()))?;
    drop(stdout);
    if let Some(path) = &args.out {
        cascade::write_report_json(&report, path)?;
    }
    if let Some(path) = &args.text {
        let mut f = std::fs::File::create(path)?;
        report
            .write_table(&mut f, "detections")
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(())
}

fn cmd_pipeline(args: PipelineArgs, config: &FileConfig, seed: u64) -> Result<(), CliError> {
    let images_dir = args
        .images
        .or_else(|| config.input.images_dir.clone())
        .ok_or_else(|| {
            CliError::Usage("pipeline needs --images or [input].images_dir in the config".into())
        })?;
    let out_dir = args
        .out
        .or_else(|| config.output.dir.clone())
        .ok_or_else(|| {
            CliError::Usage("pipeline needs --out or [output].dir in the config".into())
        })?;
    let truth_path = args.truth.or_else(|| config.input.truth.clone());

    let images = load_source_images(&images_dir)?;
    let truth = match &truth_path {
        Some(p) => Some(read_annotations_file(p)?),
        None => None,
    };
    let pipeline_config = config.pipeline_config(seed);
    let manifest = cascade::run_pipeline(&images, truth.as_deref(), &pipeline_config, &out_dir)?;
    println!(
        "pipeline complete: {} images, manifest at {}",
        manifest.images.len(),
        out_dir.join("manifest.json").display()
    );
    if let Some(report) = &manifest.report_text_file {
        let text = std::fs::read_to_string(out_dir.join(report))?;
        print!("{text}");
    }
    Ok(())
}

fn cmd_schedule_dump(args: ScheduleDumpArgs) -> Result<(), CliError> {
    let defaults = CyclicalLrConfig::default();
    let cfg = CyclicalLrConfig {
        max_lr: args.max_lr.unwrap_or(defaults.max_lr),
        base_lr: args.base_lr.unwrap_or(defaults.base_lr),
        step_size: args.step_size.unwrap_or(defaults.step_size),
        policy: defaults.policy,
    };
    if cfg.base_lr <= 0.0 || cfg.base_lr > cfg.max_lr {
        return Err(CliError::Usage(format!(
            "need 0 < base_lr <= max_lr, got base {} max {}",
            cfg.base_lr, cfg.max_lr
        )));
    }
    if cfg.step_size == 0 {
        return Err(CliError::Usage("--step-size must be >= 1".into()));
    }
    let mut out: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(out, "iteration,lr")?;
    for (it, lr) in cfg.dump(args.iterations) {
        writeln!(out, "{it},{lr}")?;
    }
    Ok(())
}

fn cmd_adapter_detect(args: AdapterDetectArgs, config: &FileConfig) -> Result<(), CliError> {
    let blob = args.blob.apply(config.blob.unwrap_or_default());
    let macenko = config.macenko.unwrap_or_default();
    let base = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let mut rdr = csv::Reader::from_path(&args.manifest)
        .map_err(|e| CliError::Data(format!("manifest: {e}")))?;
    let mut rows: Vec<cascade::adapter::PatchManifestRow> = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec.map_err(|e| CliError::Data(format!("manifest: {e}")))?);
    }
    let patches: Vec<crate::RgbImage> = rows
        .iter()
        .map(|r| Ok(image::open(base.join(&r.file))?.to_rgb8()))
        .collect::<Result<_, CliError>>()?;

    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    // one stain model pooled over all patches; padding is white and never
    // counts as tissue
    let model = match estimate_stain_model_pooled(&patches, &macenko) {
        Ok(m) => m,
        Err(StainError::InsufficientTissue { .. }) => {
            // no tissue in the whole manifest: no candidates
            out.flush()?;
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };

    #[derive(Serialize)]
    struct OutRecord {
        patch_id: usize,
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        score: f64,
        label: u32,
    }

    for (row, patch) in rows.iter().zip(&patches) {
        let conc = deconvolve_od(&rgb_to_od(patch), &model)?;
        let local = detect_in_concentrations("patch", &conc, &blob);
        for b in &local.boxes {
            let rec = OutRecord {
                patch_id: row.patch_id,
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
                score: b.score,
                label: b.label,
            };
            serde_json::to_writer(&mut out, &rec).map_err(|e| CliError::Data(e.to_string()))?;
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn cmd_adapter_classify(args: AdapterClassifyArgs) -> Result<(), CliError> {
    let base = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let mut rdr = csv::Reader::from_path(&args.manifest)
        .map_err(|e| CliError::Data(format!("manifest: {e}")))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);

    #[derive(Serialize)]
    struct OutRecord {
        box_id: usize,
        score: f64,
    }

    for rec in rdr.deserialize() {
        let row: cascade::adapter::CropManifestRow =
            rec.map_err(|e| CliError::Data(format!("manifest: {e}")))?;
        let crop = image::open(base.join(&row.file))?.to_rgb8();
        let rec = OutRecord {
            box_id: row.box_id,
            score: cascade::mean_darkness(&crop),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
