//! Deterministic k-fold assignment of image ids.
//!
//! ```bash
//! cargo run -p mitokit --example kfold_split
//! ```

use mitokit::folds::split;

fn main() {
    // 150 annotated images into 4 folds, the classic ensemble setup.
    let ids: Vec<String> = (0..150).map(|i| format!("case_{i:03}")).collect();
    let assignment = split(&ids, 4, 2021).unwrap();
    println!("fold sizes: {:?}", assignment.fold_sizes());

    for fold in 0..4 {
        let (train, val) = assignment.train_val(fold).unwrap();
        println!(
            "fold {fold}: train {} / validation {} (first val id: {})",
            train.len(),
            val.len(),
            val[0]
        );
    }

    // same seed, same assignment, every time
    let again = split(&ids, 4, 2021).unwrap();
    assert_eq!(assignment, again);

    let out = std::env::temp_dir().join("mitokit-examples/folds.csv");
    std::fs::create_dir_all(out.parent().unwrap()).unwrap();
    assignment.write_csv_file(&out).unwrap();
    println!("assignment written to {}", out.display());
}
