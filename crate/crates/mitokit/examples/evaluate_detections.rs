//! Greedy point matching and the precision/recall/F1 report.
//!
//! ```bash
//! cargo run -p mitokit --example evaluate_detections
//! ```

use mitokit::ensemble::{DetectionBox, DetectionSet};
use mitokit::evaluate::{evaluate_detections, threshold_sweep, MatchConfig};
use mitokit::tiling::{AnnotationLabel, PointAnnotation};

fn det(cx: f64, cy: f64, score: f64) -> DetectionBox {
    DetectionBox { x1: cx - 16.0, y1: cy - 16.0, x2: cx + 16.0, y2: cy + 16.0, score, model_id: 0, label: 0 }
}

fn truth(x: u32, y: u32) -> PointAnnotation {
    PointAnnotation { image_id: "roi".into(), x, y, label: AnnotationLabel::Mitosis }
}

fn main() {
    // three real mitoses; the detector found two of them (one slightly off
    // center), plus two spurious boxes
    let truths = vec![truth(100, 100), truth(300, 220), truth(512, 400)];
    let dets = vec![DetectionSet {
        image_id: "roi".into(),
        boxes: vec![
            det(101.0, 103.0, 0.95),
            det(310.0, 228.0, 0.80),
            det(450.0, 90.0, 0.55),
            det(200.0, 350.0, 0.35),
        ],
        num_models: 1,
    }];

    let cfg = MatchConfig::default(); // 30 px tolerance
    let report = evaluate_detections(&dets, &truths, &cfg).unwrap();
    report.write_table(std::io::stdout().lock(), "demo detector").unwrap();

    println!("\noperating points over the score threshold:");
    let sweeps = threshold_sweep(&dets, &truths, &cfg, &[0.0, 0.3, 0.5, 0.7, 0.9]).unwrap();
    println!("{:>9} {:>10} {:>8} {:>8}", "threshold", "precision", "recall", "f1");
    for (t, r) in [0.0, 0.3, 0.5, 0.7, 0.9].iter().zip(&sweeps) {
        println!(
            "{t:>9.1} {:>9.1}% {:>7.1}% {:>7.1}%",
            r.precision * 100.0,
            r.recall * 100.0,
            r.f1 * 100.0
        );
    }
}
