//! Full two-stage run on a planted fixture: one-step vs two-step.
//!
//! Dark blobs play the mitoses, pale blobs the look-alikes that fool the
//! first stage. A passthrough classifier keeps every candidate (one-step
//! behaviour); the darkness classifier then culls the pale decoys, trading
//! a little recall machinery for far fewer false positives.
//!
//! ```bash
//! cargo run -p mitokit --example two_stage_pipeline
//! ```

use mitokit::cascade::{run_pipeline, CascadeConfig, PipelineConfig, SourceImage};
use mitokit::evaluate::EvalReport;
use mitokit::refdetect::BlobParams;
use mitokit::stain::StainModel;
use mitokit::synthetic::{planted_blob_scene, SceneParams, RUIFROK_EOSIN, RUIFROK_HEMATOXYLIN};
use mitokit::tiling::PatchShape;

fn main() {
    let model = StainModel {
        stain_vectors: [RUIFROK_HEMATOXYLIN, RUIFROK_EOSIN],
        max_concentrations: [1.0, 1.0],
    };
    let scene = planted_blob_scene(
        "fixture",
        &SceneParams::default(),
        &model,
        &[(80, 90), (220, 160), (430, 310)],  // truths
        &[(330, 90), (140, 300)],             // decoys
    );
    let images = vec![SourceImage { id: "fixture".into(), image: scene.image.clone() }];

    let base = PipelineConfig {
        detectors: vec!["builtin:blob".into()],
        blob: BlobParams { conc_threshold: 0.25, ..Default::default() },
        cascade: CascadeConfig {
            crop_size: 32,
            patch: PatchShape { width: 256, height: 192 },
            ..Default::default()
        },
        ..Default::default()
    };

    let root = std::env::temp_dir().join("mitokit-examples/two_stage_pipeline");
    let _ = std::fs::remove_dir_all(&root);

    // one-step: stage 1 only (passthrough classifier keeps everything)
    let mut one_step = base.clone();
    one_step.classifier = "passthrough".into();
    run_pipeline(&images, Some(&scene.truths), &one_step, &root.join("one_step")).unwrap();

    // two-step: darkness classifier rejects the pale decoys
    let mut two_step = base;
    two_step.classifier = "builtin:darkness".into();
    run_pipeline(&images, Some(&scene.truths), &two_step, &root.join("two_step")).unwrap();

    let report = |dir: &str| -> EvalReport {
        let text = std::fs::read_to_string(root.join(dir).join("report.json")).unwrap();
        serde_json::from_str(&text).unwrap()
    };
    let one = report("one_step");
    let two = report("two_step");
    println!("{:<10} {:>5} {:>5} {:>5} {:>10} {:>8} {:>8}", "method", "tp", "fp", "fn", "precision", "recall", "f1");
    for (name, r) in [("one-step", &one), ("two-step", &two)] {
        println!(
            "{:<10} {:>5} {:>5} {:>5} {:>9.1}% {:>7.1}% {:>7.1}%",
            name,
            r.tp,
            r.fp,
            r.fn_,
            r.precision * 100.0,
            r.recall * 100.0,
            r.f1 * 100.0
        );
    }
    println!("\nrun directories under {}", root.display());
}
