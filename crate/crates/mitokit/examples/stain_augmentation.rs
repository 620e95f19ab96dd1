//! Estimate a stain model from an image and render stain-shifted variants.
//!
//! ```bash
//! cargo run -p mitokit --example stain_augmentation
//! ```

use mitokit::stain::{estimate_stain_model, generate_variants, AugmentParams, MacenkoConfig};
use mitokit::synthetic::{random_stain_model, TissueSampler};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let out_dir = std::env::temp_dir().join("mitokit-examples/stain_augmentation");
    std::fs::create_dir_all(&out_dir).unwrap();

    // Render a synthetic H&E-like tissue image from a known stain model.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let truth = random_stain_model(&mut rng);
    let img = TissueSampler::default().render(256, 256, &truth, &mut rng);
    img.save(out_dir.join("source.png")).unwrap();

    // Recover the stain basis from pixels alone.
    let model = estimate_stain_model(&img, &MacenkoConfig::default()).unwrap();
    println!("estimated hematoxylin: {:?}", model.hematoxylin());
    println!("true      hematoxylin: {:?}", truth.hematoxylin());
    println!("estimated eosin:       {:?}", model.eosin());
    println!("true      eosin:       {:?}", truth.eosin());
    model.write_text_file(&out_dir.join("stain_model.txt")).unwrap();

    // Ten variants with shifted stain appearance, deterministic in the seed.
    let params = AugmentParams {
        seed: 42,
        ..Default::default()
    };
    let variants = generate_variants(&img, &params).unwrap();
    for (i, v) in variants.iter().enumerate() {
        v.save(out_dir.join(format!("source_aug{i}.png"))).unwrap();
    }
    println!(
        "wrote source.png, stain_model.txt and {} variants to {}",
        variants.len(),
        out_dir.display()
    );
}
