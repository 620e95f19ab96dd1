//! Split an image into padded patches and reassemble it bit-exactly.
//!
//! ```bash
//! cargo run -p mitokit --example tile_and_stitch
//! ```

use mitokit::tiling::{plan_grid, PatchShape};
use mitokit::RgbImage;

fn main() {
    // A 3000x2000 image does not divide evenly into 2048x1536 patches, so
    // the right column and bottom row get white padding.
    let img = RgbImage::from_fn(3000, 2000, |x, y| {
        image::Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8])
    });
    let grid = plan_grid(img.width(), img.height(), PatchShape::default());
    println!(
        "{}x{} image -> {} patches of {}x{} (width x height)",
        grid.image_width,
        grid.image_height,
        grid.patches.len(),
        grid.patch.width,
        grid.patch.height
    );
    for r in &grid.patches {
        println!(
            "  patch {} at ({}, {}) valid {}x{}",
            r.patch_id, r.origin_x, r.origin_y, r.valid_width, r.valid_height
        );
    }

    let patches = grid.extract_all(&img).unwrap();
    let back = grid.stitch(&patches).unwrap();
    assert_eq!(back.as_raw(), img.as_raw());
    println!("stitched image matches the original byte for byte");

    let out_dir = std::env::temp_dir().join("mitokit-examples/tile_and_stitch");
    std::fs::create_dir_all(&out_dir).unwrap();
    grid.write_manifest_file(&out_dir.join("grid.txt")).unwrap();
    println!("grid manifest written to {}", out_dir.join("grid.txt").display());
}
