//! Weighted Boxes Fusion across a four-model ensemble.
//!
//! ```bash
//! cargo run -p mitokit --example wbf_fusion
//! ```

use mitokit::ensemble::{wbf_fuse, DetectionBox, DetectionSet, WbfParams};

fn bx(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, model_id: usize) -> DetectionBox {
    DetectionBox { x1, y1, x2, y2, score, model_id, label: 0 }
}

fn main() {
    // Four models looked at the same image. Three of them agree on a cell
    // near (100, 100) with slightly different boxes; one hallucinated a box
    // of its own far away.
    let set = DetectionSet {
        image_id: "slide_017".into(),
        boxes: vec![
            bx(96.0, 98.0, 128.0, 130.0, 0.91, 0),
            bx(100.0, 100.0, 132.0, 132.0, 0.84, 1),
            bx(98.0, 95.0, 129.0, 127.0, 0.77, 2),
            bx(410.0, 300.0, 440.0, 332.0, 0.65, 3),
        ],
        num_models: 4,
    };

    println!("input boxes:");
    for b in &set.boxes {
        println!(
            "  model {}: ({:6.1}, {:6.1}, {:6.1}, {:6.1}) score {:.2}",
            b.model_id, b.x1, b.y1, b.x2, b.y2, b.score
        );
    }

    let fused = wbf_fuse(&set, &WbfParams::default());
    println!("\nfused ({} clusters):", fused.boxes.len());
    for b in &fused.boxes {
        println!(
            "  ({:6.1}, {:6.1}, {:6.1}, {:6.1}) score {:.3}",
            b.x1, b.y1, b.x2, b.y2, b.score
        );
    }
    println!(
        "\nthe agreed-upon cell keeps a high score (3 of 4 models), while\n\
         the single-model box is rescaled by min(1,4)/4 = 0.25"
    );
}
