//! A complete external stage-2 adapter, ready to copy.
//!
//! Invoked by the orchestrator as `<program> --manifest <csv> --out <jsonl>`
//! it reads the crop manifest (`box_id,file`), scores each PNG crop and
//! writes one `{"box_id": …, "score": …}` JSON line per crop. Any stack
//! that can read CSV and PNG and write JSON lines can implement this; the
//! scoring below (mean darkness) is where a real classifier would run its
//! model.
//!
//! Run without arguments to see the full exchange: the example builds a few
//! crops, writes the manifest, invokes itself as a subprocess the way the
//! cascade would, and prints the scores it gets back.
//!
//! ```bash
//! cargo run -p mitokit --example custom_classifier_adapter
//! ```

use std::path::{Path, PathBuf};

use mitokit::cascade::mean_darkness;
use mitokit::RgbImage;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() == 1 {
        demo();
        return;
    }
    if let (Some(m), Some(o)) = (flag_value(&args, "--manifest"), flag_value(&args, "--out")) {
        run_as_adapter(Path::new(&m), Path::new(&o));
        return;
    }
    eprintln!("usage: {} [--manifest <csv> --out <jsonl>]", args[0]);
    std::process::exit(1);
}

fn flag_value(args: &[String], name: &str) -> Option<String> {
    args.iter()
        .position(|a| a == name)
        .and_then(|i| args.get(i + 1))
        .cloned()
}

/// The adapter side of the protocol.
fn run_as_adapter(manifest: &Path, out: &Path) {
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut rdr = csv::Reader::from_path(manifest).expect("read manifest");
    let mut out_file = std::fs::File::create(out).expect("create output");
    for record in rdr.deserialize() {
        let row: mitokit::cascade::adapter::CropManifestRow = record.expect("manifest row");
        let crop = image::open(base.join(&row.file)).expect("read crop").to_rgb8();
        // a real classifier would score the crop here
        let score = mean_darkness(&crop);
        use std::io::Write;
        writeln!(out_file, "{{\"box_id\":{},\"score\":{}}}", row.box_id, score).unwrap();
    }
}

/// The orchestrator side: write crops + manifest, invoke the adapter,
/// read the scores back.
fn demo() {
    let dir = std::env::temp_dir().join("mitokit-examples/custom_classifier_adapter");
    std::fs::create_dir_all(&dir).unwrap();

    let shades = [30u8, 120, 230];
    let manifest_path = dir.join("manifest.csv");
    let mut wtr = csv::Writer::from_path(&manifest_path).unwrap();
    for (box_id, &v) in shades.iter().enumerate() {
        let file = format!("crop_{box_id:05}.png");
        RgbImage::from_pixel(32, 32, image::Rgb([v, v, v]))
            .save(dir.join(&file))
            .unwrap();
        wtr.serialize(mitokit::cascade::adapter::CropManifestRow { box_id, file })
            .unwrap();
    }
    wtr.flush().unwrap();

    let out_path = dir.join("scores.jsonl");
    let me: PathBuf = std::env::current_exe().unwrap();
    let status = std::process::Command::new(&me)
        .arg("--manifest")
        .arg(&manifest_path)
        .arg("--out")
        .arg(&out_path)
        .status()
        .expect("spawn adapter");
    assert!(status.success());

    println!("adapter exchange in {}", dir.display());
    println!("scores returned:");
    print!("{}", std::fs::read_to_string(&out_path).unwrap());
    println!("(darker crops score higher; a real model plugs in the same slot)");
}
