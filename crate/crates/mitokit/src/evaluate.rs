//! Point-based detection matching and precision/recall/F1 reporting.
//!
//! Ground truth is a set of annotated points; a detection counts as a true
//! positive when its box center lies within a pixel radius of an unclaimed
//! truth point. Matching is greedy in descending score order, one-to-one,
//! and deterministic. Counts are pooled across images (micro-averaging)
//! before the metrics are computed.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::DetectionSet;
use crate::tiling::PointAnnotation;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("annotation for image {truth} fed to matcher for image {dets}")]
    ImageIdMismatch { dets: String, truth: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Matching rule: a detection may claim a truth point within `radius`
/// pixels of its box center. The standard tolerance for mitosis scoring is
/// 7.5 µm, about 30 px at 0.25 µm/px.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MatchConfig {
    pub radius: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { radius: 30.0 }
    }
}

/// Outcome of matching one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(detection index, truth index)` pairs, in claim order.
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy one-to-one matching of detections against truth points.
///
/// Detections are visited in descending score order (ties broken by box
/// coordinates); each claims the nearest unclaimed truth within the radius
/// (distance ties broken by truth index). Unclaimed detections are false
/// positives, unclaimed truths false negatives.
pub fn match_detections(
    dets: &DetectionSet,
    truth: &[PointAnnotation],
    cfg: &MatchConfig,
) -> Result<MatchResult, EvalError> {
    for t in truth {
        if t.image_id != dets.image_id {
            return Err(EvalError::ImageIdMismatch {
                dets: dets.image_id.clone(),
                truth: t.image_id.clone(),
            });
        }
    }

    let mut order: Vec<usize> = (0..dets.boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let ba = &dets.boxes[a];
        let bb = &dets.boxes[b];
        bb.score
            .total_cmp(&ba.score)
            .then(ba.x1.total_cmp(&bb.x1))
            .then(ba.y1.total_cmp(&bb.y1))
            .then(ba.x2.total_cmp(&bb.x2))
            .then(ba.y2.total_cmp(&bb.y2))
    });

    let mut claimed = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for &di in &order {
        let (cx, cy) = dets.boxes[di].center();
        let mut best: Option<(f64, usize)> = None;
        for (ti, t) in truth.iter().enumerate() {
            if claimed[ti] {
                continue;
            }
            let dx = cx - t.x as f64;
            let dy = cy - t.y as f64;
            let dist = (dx * dx + dy * dy).sqrt();
            if dist <= cfg.radius {
                let better = match best {
                    None => true,
                    Some((bd, _)) => dist < bd,
                };
                if better {
                    best = Some((dist, ti));
                }
            }
        }
        if let Some((_, ti)) = best {
            claimed[ti] = true;
            pairs.push((di, ti));
        }
    }

    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: dets.boxes.len() - tp,
        fn_: truth.len() - tp,
        pairs,
    })
}

/// Raw counts for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCounts {
    pub image_id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Pooled detection metrics with the per-image breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_image: Vec<ImageCounts>,
}

/// `tp / (tp + fp)`, zero when there are no detections.
pub fn precision(tp: usize, fp: usize) -> f64 {
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

/// `tp / (tp + fn)`, zero when there is no truth.
pub fn recall(tp: usize, fn_: usize) -> f64 {
    if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    }
}

/// Harmonic mean of precision and recall, zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Pool per-image counts into a micro-averaged report.
pub fn report(per_image: Vec<ImageCounts>) -> EvalReport {
    let tp: usize = per_image.iter().map(|c| c.tp).sum();
    let fp: usize = per_image.iter().map(|c| c.fp).sum();
    let fn_: usize = per_image.iter().map(|c| c.fn_).sum();
    let p = precision(tp, fp);
    let r = recall(tp, fn_);
    EvalReport {
        tp,
        fp,
        fn_,
        precision: p,
        recall: r,
        f1: f1_score(p, r),
        per_image,
    }
}

/// Match every detection set against its image's truth points and pool.
///
/// Truth points are routed to detection sets by image id; images present
/// only in the truth contribute false negatives.
pub fn evaluate_detections(
    dets: &[DetectionSet],
    truth: &[PointAnnotation],
    cfg: &MatchConfig,
) -> Result<EvalReport, EvalError> {
    let mut per_image = Vec::new();
    let mut seen: Vec<&str> = Vec::new();
    for set in dets {
        let truths: Vec<PointAnnotation> = truth
            .iter()
            .filter(|t| t.image_id == set.image_id)
            .cloned()
            .collect();
        let m = match_detections(set, &truths, cfg)?;
        per_image.push(ImageCounts {
            image_id: set.image_id.clone(),
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        });
        seen.push(&set.image_id);
    }
    // truth-only images: everything is a miss
    let mut extra: Vec<&str> = Vec::new();
    for t in truth {
        if !seen.iter().any(|s| *s == t.image_id) && !extra.contains(&t.image_id.as_str()) {
            extra.push(&t.image_id);
        }
    }
    for id in extra {
        let fn_ = truth.iter().filter(|t| t.image_id == id).count();
        per_image.push(ImageCounts {
            image_id: id.to_string(),
            tp: 0,
            fp: 0,
            fn_,
        });
    }
    Ok(report(per_image))
}

/// One report per ascending score threshold; detections below the threshold
/// are dropped before matching.
pub fn threshold_sweep(
    dets: &[DetectionSet],
    truth: &[PointAnnotation],
    cfg: &MatchConfig,
    thresholds: &[f64],
) -> Result<Vec<EvalReport>, EvalError> {
    debug_assert!(
        thresholds.windows(2).all(|w| w[0] <= w[1]),
        "thresholds must be sorted ascending"
    );
    thresholds
        .iter()
        .map(|&t| {
            let filtered: Vec<DetectionSet> = dets.iter().map(|s| s.filtered(t)).collect();
            evaluate_detections(&filtered, truth, cfg)
        })
        .collect()
}

impl EvalReport {
    /// Render the familiar three-column metrics table.
    pub fn write_table<W: Write>(&self, mut w: W, method: &str) -> std::io::Result<()> {
        writeln!(w, "{:<46} {:>10} {:>10} {:>10}", "Method", "Precision", "Recall", "F1-score")?;
        writeln!(
            w,
            "{:<46} {:>9.2}% {:>9.2}% {:>9.2}%",
            method,
            self.precision * 100.0,
            self.recall * 100.0,
            self.f1 * 100.0
        )?;
        writeln!(w, "tp={} fp={} fn={}", self.tp, self.fp, self.fn_)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::DetectionBox;
    use crate::tiling::AnnotationLabel;

    fn det(cx: f64, cy: f64, score: f64) -> DetectionBox {
        DetectionBox {
            x1: cx - 5.0,
            y1: cy - 5.0,
            x2: cx + 5.0,
            y2: cy + 5.0,
            score,
            model_id: 0,
            label: 0,
        }
    }

    fn truth_at(pts: &[(u32, u32)]) -> Vec<PointAnnotation> {
        pts.iter()
            .map(|&(x, y)| PointAnnotation {
                image_id: "img".into(),
                x,
                y,
                label: AnnotationLabel::Mitosis,
            })
            .collect()
    }

    fn set_of(boxes: Vec<DetectionBox>) -> DetectionSet {
        DetectionSet {
            image_id: "img".into(),
            boxes,
            num_models: 1,
        }
    }

    #[test]
    fn empty_everything() {
        let m = match_detections(&set_of(vec![]), &[], &MatchConfig::default()).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 0));
    }

    #[test]
    fn exact_hit() {
        let m = match_detections(
            &set_of(vec![det(50.0, 50.0, 0.9)]),
            &truth_at(&[(50, 50)]),
            &MatchConfig::default(),
        )
        .unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        assert_eq!(m.pairs, vec![(0, 0)]);
    }

    #[test]
    fn higher_score_claims_the_truth() {
        let dets = set_of(vec![det(52.0, 50.0, 0.8), det(50.0, 50.0, 0.9)]);
        let m = match_detections(&dets, &truth_at(&[(50, 50)]), &MatchConfig::default()).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        // index 1 has the higher score
        assert_eq!(m.pairs, vec![(1, 0)]);
    }

    #[test]
    fn radius_is_respected() {
        let dets = set_of(vec![det(100.0, 100.0, 0.9)]);
        let m = match_detections(&dets, &truth_at(&[(100, 131)]), &MatchConfig::default()).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1), "31 px > radius 30");
        let m2 = match_detections(&dets, &truth_at(&[(100, 130)]), &MatchConfig::default()).unwrap();
        assert_eq!((m2.tp, m2.fp, m2.fn_), (1, 0, 0), "30 px is inside");
    }

    #[test]
    fn nearest_unclaimed_truth_wins() {
        // one detection between two truths: it takes the closer one
        let dets = set_of(vec![det(50.0, 50.0, 0.9)]);
        let m = match_detections(
            &dets,
            &truth_at(&[(70, 50), (55, 50)]),
            &MatchConfig::default(),
        )
        .unwrap();
        assert_eq!(m.pairs, vec![(0, 1)]);
    }

    #[test]
    fn one_to_one_counts_add_up() {
        let dets = set_of(vec![
            det(10.0, 10.0, 0.9),
            det(12.0, 10.0, 0.8),
            det(200.0, 10.0, 0.7),
        ]);
        let truths = truth_at(&[(10, 10), (300, 300)]);
        let m = match_detections(&dets, &truths, &MatchConfig::default()).unwrap();
        assert_eq!(m.tp + m.fp, dets.boxes.len());
        assert_eq!(m.tp + m.fn_, truths.len());
        // no index repeated
        let mut dseen = std::collections::HashSet::new();
        let mut tseen = std::collections::HashSet::new();
        for &(d, t) in &m.pairs {
            assert!(dseen.insert(d));
            assert!(tseen.insert(t));
        }
    }

    #[test]
    fn mismatched_image_id_is_an_error() {
        let truths = vec![PointAnnotation {
            image_id: "other".into(),
            x: 1,
            y: 1,
            label: AnnotationLabel::Mitosis,
        }];
        assert!(matches!(
            match_detections(&set_of(vec![]), &truths, &MatchConfig::default()),
            Err(EvalError::ImageIdMismatch { .. })
        ));
    }

    #[test]
    fn report_formulas() {
        let rep = report(vec![ImageCounts {
            image_id: "img".into(),
            tp: 3,
            fp: 1,
            fn_: 2,
        }]);
        assert!((rep.precision - 0.75).abs() < 1e-12);
        assert!((rep.recall - 0.6).abs() < 1e-12);
        assert!((rep.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_denominator_conventions() {
        let rep = report(vec![ImageCounts {
            image_id: "img".into(),
            tp: 0,
            fp: 0,
            fn_: 0,
        }]);
        assert_eq!(rep.precision, 0.0);
        assert_eq!(rep.recall, 0.0);
        assert_eq!(rep.f1, 0.0);
    }

    #[test]
    fn harmonic_mean_reference_points() {
        assert!((f1_score(0.2646, 0.8433) - 0.4028).abs() < 1e-4);
        assert!((f1_score(0.6541, 0.7289) - 0.6895).abs() < 1e-4);
    }

    #[test]
    fn micro_average_pools_counts() {
        let rep = report(vec![
            ImageCounts { image_id: "a".into(), tp: 1, fp: 0, fn_: 1 },
            ImageCounts { image_id: "b".into(), tp: 2, fp: 2, fn_: 0 },
        ]);
        assert_eq!((rep.tp, rep.fp, rep.fn_), (3, 2, 1));
        assert!((rep.precision - 0.6).abs() < 1e-12);
        assert!((rep.recall - 0.75).abs() < 1e-12);
    }

    #[test]
    fn sweep_boundaries() {
        let dets = vec![set_of(vec![det(10.0, 10.0, 0.8), det(60.0, 60.0, 0.3)])];
        let truth = truth_at(&[(10, 10)]);
        let cfg = MatchConfig::default();
        let reports = threshold_sweep(&dets, &truth, &cfg, &[0.0, 0.5, 1.01]).unwrap();
        // threshold 0 equals the unfiltered report
        let unfiltered = evaluate_detections(&dets, &truth, &cfg).unwrap();
        assert_eq!(reports[0], unfiltered);
        assert_eq!((reports[1].tp, reports[1].fp), (1, 0));
        // above the max score nothing is kept
        assert_eq!((reports[2].tp, reports[2].fp, reports[2].fn_), (0, 0, 1));
        // recall never increases along the sweep
        for w in reports.windows(2) {
            assert!(w[1].recall <= w[0].recall + 1e-12);
        }
    }

    #[test]
    fn sweep_recall_non_increasing_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let n_truth = rng.random_range(0..8usize);
            let n_det = rng.random_range(0..10usize);
            let truths: Vec<PointAnnotation> = (0..n_truth)
                .map(|_| PointAnnotation {
                    image_id: "img".into(),
                    x: rng.random_range(0..500),
                    y: rng.random_range(0..500),
                    label: AnnotationLabel::Mitosis,
                })
                .collect();
            let boxes: Vec<DetectionBox> = (0..n_det)
                .map(|_| {
                    let cx: f64 = rng.random_range(0.0..500.0);
                    let cy: f64 = rng.random_range(0.0..500.0);
                    det(cx, cy, rng.random_range(0.0..=1.0))
                })
                .collect();
            let dets = vec![set_of(boxes)];
            let thresholds: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
            let reports =
                threshold_sweep(&dets, &truths, &MatchConfig::default(), &thresholds).unwrap();
            for w in reports.windows(2) {
                assert!(w[1].recall <= w[0].recall + 1e-12);
                assert!(w[1].tp <= w[0].tp);
            }
        }
    }

    #[test]
    fn truth_only_images_count_as_misses() {
        let dets = vec![set_of(vec![det(10.0, 10.0, 0.9)])];
        let mut truth = truth_at(&[(10, 10)]);
        truth.push(PointAnnotation {
            image_id: "unseen".into(),
            x: 5,
            y: 5,
            label: AnnotationLabel::Mitosis,
        });
        let rep = evaluate_detections(&dets, &truth, &MatchConfig::default()).unwrap();
        assert_eq!((rep.tp, rep.fp, rep.fn_), (1, 0, 1));
    }
}
