//! Deterministic k-fold partitioning of image ids.
//!
//! Splitting happens at whole-image granularity, before any patching, so
//! patches of one image can never leak across the train/validation boundary.
//! The shuffle is an explicit Fisher–Yates over a ChaCha stream cipher RNG,
//! which makes assignments reproducible across platforms and releases.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FoldError {
    #[error("need at least k = {k} images, got {got}")]
    TooFewImages { k: usize, got: usize },
    #[error("duplicate image id: {0}")]
    DuplicateId(String),
    #[error("k must be >= 2, got {0}")]
    BadK(usize),
    #[error("validation fold {fold} out of range (k = {k})")]
    BadFoldIndex { fold: usize, k: usize },
    #[error("malformed fold csv line {line}: {msg}")]
    MalformedCsv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Assignment of every image id to exactly one of `k` folds.
///
/// Fold sizes differ by at most one. Ids keep their input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    ids: Vec<String>,
    folds: Vec<usize>,
}

impl FoldAssignment {
    /// Fold index of an image id, if present.
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id).map(|p| self.folds[p])
    }

    /// All `(id, fold)` pairs in input order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.ids.iter().map(|s| s.as_str()).zip(self.folds.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of ids assigned to each fold.
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &f in &self.folds {
            sizes[f] += 1;
        }
        sizes
    }

    /// Disjoint, exhaustive `(train, validation)` split for one fold index.
    pub fn train_val(&self, validation_fold: usize) -> Result<(Vec<String>, Vec<String>), FoldError> {
        if validation_fold >= self.k {
            return Err(FoldError::BadFoldIndex {
                fold: validation_fold,
                k: self.k,
            });
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (id, f) in self.iter() {
            if f == validation_fold {
                val.push(id.to_string());
            } else {
                train.push(id.to_string());
            }
        }
        Ok((train, val))
    }

    /// Write as CSV with header `image_id,fold`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), FoldError> {
        writeln!(w, "image_id,fold")?;
        for (id, f) in self.iter() {
            writeln!(w, "{id},{f}")?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<(), FoldError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Read back a CSV written by [`FoldAssignment::write_csv`].
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, FoldError> {
        let mut ids = Vec::new();
        let mut folds = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if n == 0 {
                continue; // header
            }
            if line.trim().is_empty() {
                continue;
            }
            let (id, fold) = line.rsplit_once(',').ok_or(FoldError::MalformedCsv {
                line: n + 1,
                msg: "expected image_id,fold".into(),
            })?;
            let fold: usize = fold.trim().parse().map_err(|e| FoldError::MalformedCsv {
                line: n + 1,
                msg: format!("bad fold index: {e}"),
            })?;
            ids.push(id.to_string());
            folds.push(fold);
        }
        let k = folds.iter().copied().max().map_or(0, |m| m + 1);
        Ok(Self { k, ids, folds })
    }
}

/// Seeded shuffle followed by round-robin fold assignment.
///
/// Deterministic in `(ids, k, seed)`; ids must be unique and there must be
/// at least one id per fold.
pub fn split<S: AsRef<str>>(image_ids: &[S], k: usize, seed: u64) -> Result<FoldAssignment, FoldError> {
    if k < 2 {
        return Err(FoldError::BadK(k));
    }
    if image_ids.len() < k {
        return Err(FoldError::TooFewImages {
            k,
            got: image_ids.len(),
        });
    }
    let mut seen = HashSet::new();
    for id in image_ids {
        if !seen.insert(id.as_ref()) {
            return Err(FoldError::DuplicateId(id.as_ref().to_string()));
        }
    }

    // Fisher–Yates over the index range, explicit so the algorithm is pinned.
    let n = image_ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }

    // order[j] is the input index of the j-th shuffled id; fold = j mod k.
    let mut folds = vec![0usize; n];
    for (j, &input_idx) in order.iter().enumerate() {
        folds[input_idx] = j % k;
    }

    Ok(FoldAssignment {
        k,
        ids: image_ids.iter().map(|s| s.as_ref().to_string()).collect(),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img_{i:03}")).collect()
    }

    #[test]
    fn sizes_150_by_4() {
        let fa = split(&ids(150), 4, 7).unwrap();
        let mut sizes = fa.fold_sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![38, 38, 37, 37]);
    }

    #[test]
    fn one_per_fold() {
        let fa = split(&ids(4), 4, 0).unwrap();
        assert_eq!(fa.fold_sizes(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn deterministic() {
        let a = split(&ids(31), 4, 99).unwrap();
        let b = split(&ids(31), 4, 99).unwrap();
        assert_eq!(a, b);
        let c = split(&ids(31), 4, 100).unwrap();
        assert_ne!(a, c, "different seed should shuffle differently");
    }

    #[test]
    fn errors() {
        assert!(matches!(split(&ids(3), 4, 0), Err(FoldError::TooFewImages { .. })));
        assert!(matches!(split(&ids(10), 1, 0), Err(FoldError::BadK(1))));
        let dup = vec!["a", "b", "a"];
        assert!(matches!(split(&dup, 2, 0), Err(FoldError::DuplicateId(_))));
    }

    #[test]
    fn train_val_partitions() {
        let all = ids(150);
        let fa = split(&all, 4, 13).unwrap();
        let (train, val) = fa.train_val(0).unwrap();
        assert_eq!(train.len() + val.len(), 150);
        let val0: HashSet<_> = val.iter().cloned().collect();
        for t in &train {
            assert!(!val0.contains(t));
        }
        // sizes derived from the 150/4 split
        assert!(val.len() == 37 || val.len() == 38);
        assert_eq!(train.len(), 150 - val.len());

        // union of validation folds over all k = everything
        let mut union = HashSet::new();
        for f in 0..4 {
            let (_, v) = fa.train_val(f).unwrap();
            for id in v {
                assert!(union.insert(id), "id in two validation folds");
            }
        }
        assert_eq!(union.len(), 150);

        assert!(matches!(fa.train_val(4), Err(FoldError::BadFoldIndex { .. })));
    }

    #[test]
    fn partition_properties_random() {
        // fold sizes differ by at most 1 and every id appears exactly once,
        // over a spread of list lengths and k values
        let mut rng_seed = 1u64;
        for k in 2..=8usize {
            for n in [k, k + 1, 3 * k - 1, 25, 64] {
                rng_seed += 1;
                let fa = split(&ids(n), k, rng_seed).unwrap();
                let sizes = fa.fold_sizes();
                assert_eq!(sizes.iter().sum::<usize>(), n);
                let min = sizes.iter().min().unwrap();
                let max = sizes.iter().max().unwrap();
                assert!(max - min <= 1, "k={k} n={n} sizes={sizes:?}");
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let fa = split(&ids(11), 3, 5).unwrap();
        let mut buf = Vec::new();
        fa.write_csv(&mut buf).unwrap();
        let back = FoldAssignment::read_csv(&buf[..]).unwrap();
        assert_eq!(fa, back);
    }
}
