//! Run the built-in hematoxylin blob detector on a planted scene.
//!
//! ```bash
//! cargo run -p mitokit --example blob_detection
//! ```

use mitokit::refdetect::{detect_candidates, BlobParams};
use mitokit::stain::{estimate_stain_model, MacenkoConfig, StainModel};
use mitokit::synthetic::{planted_blob_scene, SceneParams, RUIFROK_EOSIN, RUIFROK_HEMATOXYLIN};

fn main() {
    let model = StainModel {
        stain_vectors: [RUIFROK_HEMATOXYLIN, RUIFROK_EOSIN],
        max_concentrations: [1.0, 1.0],
    };
    let scene = planted_blob_scene(
        "demo",
        &SceneParams::default(),
        &model,
        &[(100, 100), (400, 300), (250, 250)], // dark nuclei
        &[(180, 320)],                         // one pale decoy
    );

    let out_dir = std::env::temp_dir().join("mitokit-examples/blob_detection");
    std::fs::create_dir_all(&out_dir).unwrap();
    scene.image.save(out_dir.join("scene.png")).unwrap();

    // The detector works off an estimated model, not the ground truth one.
    let estimated = estimate_stain_model(&scene.image, &MacenkoConfig::default()).unwrap();
    let params = BlobParams {
        conc_threshold: 0.25, // keep the pale decoy detectable
        ..Default::default()
    };
    let dets = detect_candidates("demo", &scene.image, &estimated, &params).unwrap();

    println!("planted {} dark blobs and {} decoys", scene.truths.len(), scene.decoys.len());
    println!("detected {} candidates:", dets.boxes.len());
    for b in &dets.boxes {
        println!(
            "  ({:5.1}, {:5.1}, {:5.1}, {:5.1}) score {:.3}",
            b.x1, b.y1, b.x2, b.y2, b.score
        );
    }
    println!("scene image written to {}", out_dir.join("scene.png").display());
}
