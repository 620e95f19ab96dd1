//! Detection boxes and Weighted Boxes Fusion.
//!
//! WBF merges the outputs of several detection models into a single set:
//! overlapping boxes of the same class are clustered, each cluster is
//! replaced by the confidence-weighted mean of its members, and cluster
//! scores are rescaled by how many models contributed. Unlike NMS it blends
//! coordinates instead of discarding boxes, and it penalizes boxes that only
//! one model out of the ensemble produced.
//!
//! Detection sets serialize to JSON Lines, one object per box with keys
//! `image_id, x1, y1, x2, y2, score, model_id, label`. This is also the wire
//! format of the cascade adapter protocol.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned detection in image-global coordinates.
///
/// `x1 < x2`, `y1 < y2`, score in `[0, 1]`. `model_id` tracks which ensemble
/// member produced the box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub model_id: usize,
    pub label: u32,
}

impl DetectionBox {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Check the box invariants, describing the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        if self.x1 >= self.x2 {
            return Err(format!("x1 ({}) must be < x2 ({})", self.x1, self.x2));
        }
        if self.y1 >= self.y2 {
            return Err(format!("y1 ({}) must be < y2 ({})", self.y1, self.y2));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        Ok(())
    }

    /// Deterministic tie-break order: `(x1, y1, x2, y2, model_id)`.
    fn coord_key(&self) -> (f64, f64, f64, f64, usize) {
        (self.x1, self.y1, self.x2, self.y2, self.model_id)
    }
}

/// Descending score, ties broken by ascending coordinate key.
fn score_order(a: &DetectionBox, b: &DetectionBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| {
            let (ax1, ay1, ax2, ay2, am) = a.coord_key();
            let (bx1, by1, bx2, by2, bm) = b.coord_key();
            ax1.total_cmp(&bx1)
                .then(ay1.total_cmp(&by1))
                .then(ax2.total_cmp(&bx2))
                .then(ay2.total_cmp(&by2))
                .then(am.cmp(&bm))
        })
}

/// All detections for one image, with the ensemble size they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    pub boxes: Vec<DetectionBox>,
    pub num_models: usize,
}

impl DetectionSet {
    pub fn new(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            boxes: Vec::new(),
            num_models: 1,
        }
    }

    /// Boxes with score at or above a threshold, same order.
    pub fn filtered(&self, score_threshold: f64) -> Self {
        Self {
            image_id: self.image_id.clone(),
            boxes: self
                .boxes
                .iter()
                .copied()
                .filter(|b| b.score >= score_threshold)
                .collect(),
            num_models: self.num_models,
        }
    }
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// How fused scores account for how many models voted for a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    /// Multiply each fused score by `min(T, N) / N` where `T` is the cluster
    /// size and `N` the number of models. Single-model boxes in a large
    /// ensemble are pushed down.
    #[default]
    MinCount,
    /// Leave fused scores as plain member means.
    None,
}

/// Weighted Boxes Fusion hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WbfParams {
    /// Minimum IoU (strict) for a box to join an existing cluster.
    pub iou_threshold: f64,
    /// Boxes below this score are dropped before clustering.
    pub score_threshold: f64,
    pub rescale_mode: RescaleMode,
}

impl Default for WbfParams {
    fn default() -> Self {
        Self {
            iou_threshold: 0.55,
            score_threshold: 0.0,
            rescale_mode: RescaleMode::MinCount,
        }
    }
}

/// Running cluster state: confidence-weighted coordinate sums plus the plain
/// score sum, so fused coordinates and scores derive from sums alone. The
/// per-axis member extrema bound the weighted mean, which keeps the fused
/// box inside the member envelope despite rounding (and makes one-member
/// clusters exact).
struct Cluster {
    label: u32,
    sum_w: f64,
    sum_wx1: f64,
    sum_wy1: f64,
    sum_wx2: f64,
    sum_wy2: f64,
    sum_score: f64,
    count: usize,
    lowest_model_id: usize,
    lo: [f64; 4],
    hi: [f64; 4],
}

impl Cluster {
    fn open(b: &DetectionBox) -> Self {
        Self {
            label: b.label,
            sum_w: b.score,
            sum_wx1: b.score * b.x1,
            sum_wy1: b.score * b.y1,
            sum_wx2: b.score * b.x2,
            sum_wy2: b.score * b.y2,
            sum_score: b.score,
            count: 1,
            lowest_model_id: b.model_id,
            lo: [b.x1, b.y1, b.x2, b.y2],
            hi: [b.x1, b.y1, b.x2, b.y2],
        }
    }

    fn absorb(&mut self, b: &DetectionBox) {
        self.sum_w += b.score;
        self.sum_wx1 += b.score * b.x1;
        self.sum_wy1 += b.score * b.y1;
        self.sum_wx2 += b.score * b.x2;
        self.sum_wy2 += b.score * b.y2;
        self.sum_score += b.score;
        self.count += 1;
        self.lowest_model_id = self.lowest_model_id.min(b.model_id);
        for (i, v) in [b.x1, b.y1, b.x2, b.y2].into_iter().enumerate() {
            self.lo[i] = self.lo[i].min(v);
            self.hi[i] = self.hi[i].max(v);
        }
    }

    fn fused(&self) -> DetectionBox {
        DetectionBox {
            x1: (self.sum_wx1 / self.sum_w).clamp(self.lo[0], self.hi[0]),
            y1: (self.sum_wy1 / self.sum_w).clamp(self.lo[1], self.hi[1]),
            x2: (self.sum_wx2 / self.sum_w).clamp(self.lo[2], self.hi[2]),
            y2: (self.sum_wy2 / self.sum_w).clamp(self.lo[3], self.hi[3]),
            score: self.sum_score / self.count as f64,
            model_id: self.lowest_model_id,
            label: self.label,
        }
    }
}

/// Fuse the detections of a multi-model set with Weighted Boxes Fusion.
///
/// Boxes are visited in descending score order (ties broken by coordinates,
/// then model id). Each box joins the first cluster, in creation order,
/// whose running fused box overlaps it with IoU strictly above
/// `iou_threshold` and carries the same label; otherwise it opens a new
/// cluster. Fused coordinates are the score-weighted means of cluster
/// members, fused scores the plain means, optionally rescaled by cluster
/// size. The output is sorted by descending score with the same
/// deterministic tie-break, so fusion is invariant to input order.
pub fn wbf_fuse(set: &DetectionSet, params: &WbfParams) -> DetectionSet {
    let num_models = set.num_models.max(1);
    let mut boxes: Vec<DetectionBox> = set
        .boxes
        .iter()
        .copied()
        .filter(|b| b.score >= params.score_threshold)
        .collect();
    boxes.sort_by(score_order);

    let mut clusters: Vec<Cluster> = Vec::new();
    for b in &boxes {
        let joined = clusters.iter_mut().find(|c| {
            c.label == b.label && iou(&c.fused(), b) > params.iou_threshold
        });
        match joined {
            Some(c) => c.absorb(b),
            None => clusters.push(Cluster::open(b)),
        }
    }

    let mut fused: Vec<DetectionBox> = clusters
        .iter()
        .map(|c| {
            let mut f = c.fused();
            if params.rescale_mode == RescaleMode::MinCount {
                f.score *= c.count.min(num_models) as f64 / num_models as f64;
            }
            f
        })
        .collect();
    fused.sort_by(score_order);

    DetectionSet {
        image_id: set.image_id.clone(),
        boxes: fused,
        num_models,
    }
}

/// Wire record for the JSON Lines detection format.
#[derive(Debug, Serialize, Deserialize)]
struct BoxRecord {
    image_id: String,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
    model_id: usize,
    label: u32,
}

/// Write detection sets as JSON Lines, one box per line.
pub fn write_detections_jsonl<'a, W: Write>(
    sets: impl IntoIterator<Item = &'a DetectionSet>,
    mut w: W,
) -> Result<(), EnsembleError> {
    for set in sets {
        for b in &set.boxes {
            let rec = BoxRecord {
                image_id: set.image_id.clone(),
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
                score: b.score,
                model_id: b.model_id,
                label: b.label,
            };
            serde_json::to_writer(&mut w, &rec)
                .map_err(|e| EnsembleError::MalformedLine { line: 0, msg: e.to_string() })?;
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn write_detections_file(
    sets: &[DetectionSet],
    path: &std::path::Path,
) -> Result<(), EnsembleError> {
    let f = std::fs::File::create(path)?;
    write_detections_jsonl(sets.iter(), std::io::BufWriter::new(f))
}

/// Read a JSON Lines detection file, grouping boxes by image id in
/// first-seen order. `num_models` is recovered as `max(model_id) + 1`.
pub fn read_detections_jsonl<R: BufRead>(r: R) -> Result<Vec<DetectionSet>, EnsembleError> {
    let mut sets: Vec<DetectionSet> = Vec::new();
    let mut max_model = 0usize;
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxRecord =
            serde_json::from_str(&line).map_err(|e| EnsembleError::MalformedLine {
                line: n + 1,
                msg: e.to_string(),
            })?;
        let b = DetectionBox {
            x1: rec.x1,
            y1: rec.y1,
            x2: rec.x2,
            y2: rec.y2,
            score: rec.score,
            model_id: rec.model_id,
            label: rec.label,
        };
        b.validate()
            .map_err(|msg| EnsembleError::MalformedLine { line: n + 1, msg })?;
        max_model = max_model.max(rec.model_id);
        match sets.iter_mut().find(|s| s.image_id == rec.image_id) {
            Some(s) => s.boxes.push(b),
            None => {
                let mut s = DetectionSet::new(rec.image_id);
                s.boxes.push(b);
                sets.push(s);
            }
        }
    }
    for s in &mut sets {
        s.num_models = max_model + 1;
    }
    Ok(sets)
}

pub fn read_detections_file(path: &std::path::Path) -> Result<Vec<DetectionSet>, EnsembleError> {
    let f = std::fs::File::open(path)?;
    read_detections_jsonl(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, model_id: usize) -> DetectionBox {
        DetectionBox { x1, y1, x2, y2, score, model_id, label: 0 }
    }

    fn set_of(boxes: Vec<DetectionBox>, num_models: usize) -> DetectionSet {
        DetectionSet { image_id: "img".into(), boxes, num_models }
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 1.0, 0);
        assert_eq!(iou(&a, &a), 1.0);
        let disjoint = bx(5.0, 5.0, 6.0, 6.0, 1.0, 0);
        assert_eq!(iou(&a, &disjoint), 0.0);
        // (0,0,2,2) vs (1,0,3,2): inter 2, union 6
        let b = bx(1.0, 0.0, 3.0, 2.0, 1.0, 0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        // edge contact is not overlap
        let touching = bx(2.0, 0.0, 4.0, 2.0, 1.0, 0);
        assert_eq!(iou(&a, &touching), 0.0);
    }

    #[test]
    fn single_box_identity() {
        let set = set_of(vec![bx(3.0, 4.0, 10.0, 12.0, 0.7, 0)], 1);
        let out = wbf_fuse(&set, &WbfParams::default());
        assert_eq!(out.boxes.len(), 1);
        let f = out.boxes[0];
        assert_eq!((f.x1, f.y1, f.x2, f.y2), (3.0, 4.0, 10.0, 12.0));
        assert_eq!(f.score, 0.7); // min(1,1)/1 = 1
    }

    #[test]
    fn identical_boxes_average_scores() {
        let set = set_of(
            vec![bx(1.0, 1.0, 5.0, 5.0, 0.6, 0), bx(1.0, 1.0, 5.0, 5.0, 0.8, 1)],
            2,
        );
        let out = wbf_fuse(&set, &WbfParams::default());
        assert_eq!(out.boxes.len(), 1);
        let f = out.boxes[0];
        assert_eq!((f.x1, f.y1, f.x2, f.y2), (1.0, 1.0, 5.0, 5.0));
        assert!((f.score - 0.7).abs() < 1e-12); // mean, min(2,2)/2 = 1
    }

    #[test]
    fn weighted_coordinate_means() {
        let set = set_of(
            vec![bx(0.0, 0.0, 10.0, 10.0, 0.9, 0), bx(2.0, 0.0, 12.0, 10.0, 0.1, 1)],
            2,
        );
        let out = wbf_fuse(&set, &WbfParams::default());
        assert_eq!(out.boxes.len(), 1);
        let f = out.boxes[0];
        assert!((f.x1 - 0.2).abs() < 1e-12);
        assert!((f.x2 - 10.2).abs() < 1e-12);
        assert_eq!(f.y1, 0.0);
        assert_eq!(f.y2, 10.0);
        assert!((f.score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn min_count_rescale_penalizes_lone_boxes() {
        let set = set_of(
            vec![bx(0.0, 0.0, 4.0, 4.0, 0.8, 0), bx(50.0, 50.0, 60.0, 60.0, 0.6, 1)],
            2,
        );
        let out = wbf_fuse(&set, &WbfParams::default());
        assert_eq!(out.boxes.len(), 2);
        assert!((out.boxes[0].score - 0.4).abs() < 1e-12);
        assert!((out.boxes[1].score - 0.3).abs() < 1e-12);
    }

    #[test]
    fn labels_do_not_mix() {
        let mut a = bx(0.0, 0.0, 4.0, 4.0, 0.8, 0);
        let mut b = bx(0.0, 0.0, 4.0, 4.0, 0.6, 1);
        a.label = 0;
        b.label = 1;
        let out = wbf_fuse(&set_of(vec![a, b], 2), &WbfParams::default());
        assert_eq!(out.boxes.len(), 2);
    }

    #[test]
    fn permutation_invariance() {
        let boxes = vec![
            bx(0.0, 0.0, 10.0, 10.0, 0.9, 0),
            bx(1.0, 1.0, 11.0, 11.0, 0.5, 1),
            bx(2.0, 0.0, 12.0, 10.0, 0.1, 2),
            bx(40.0, 40.0, 50.0, 50.0, 0.7, 1),
        ];
        let fwd = wbf_fuse(&set_of(boxes.clone(), 3), &WbfParams::default());
        let mut rev_boxes = boxes;
        rev_boxes.reverse();
        let rev = wbf_fuse(&set_of(rev_boxes, 3), &WbfParams::default());
        assert_eq!(fwd, rev);
    }

    #[test]
    fn high_iou_threshold_keeps_everything_separate() {
        let boxes = vec![
            bx(0.0, 0.0, 10.0, 10.0, 0.9, 0),
            bx(1.0, 1.0, 11.0, 11.0, 0.5, 1),
        ];
        let params = WbfParams { iou_threshold: 0.9999, ..Default::default() };
        let out = wbf_fuse(&set_of(boxes, 2), &params);
        assert_eq!(out.boxes.len(), 2);
        // each cluster has one member: scores halved by min(1,2)/2
        assert!((out.boxes[0].score - 0.45).abs() < 1e-12);
        assert!((out.boxes[1].score - 0.25).abs() < 1e-12);
    }

    #[test]
    fn score_threshold_prefilters() {
        let boxes = vec![
            bx(0.0, 0.0, 10.0, 10.0, 0.9, 0),
            bx(0.0, 0.0, 10.0, 10.0, 0.05, 1),
        ];
        let params = WbfParams { score_threshold: 0.1, ..Default::default() };
        let out = wbf_fuse(&set_of(boxes, 2), &params);
        assert_eq!(out.boxes.len(), 1);
        // lone survivor: mean 0.9, rescaled by 1/2
        assert!((out.boxes[0].score - 0.45).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_empty_output() {
        let out = wbf_fuse(&set_of(vec![], 4), &WbfParams::default());
        assert!(out.boxes.is_empty());
        assert_eq!(out.num_models, 4);
    }

    #[test]
    fn fused_coordinates_bounded_by_members() {
        let boxes = vec![
            bx(0.0, 0.0, 10.0, 10.0, 0.9, 0),
            bx(2.0, 1.0, 12.0, 11.0, 0.4, 1),
            bx(1.0, 2.0, 11.0, 12.0, 0.6, 2),
        ];
        let out = wbf_fuse(&set_of(boxes, 3), &WbfParams::default());
        assert_eq!(out.boxes.len(), 1);
        let f = out.boxes[0];
        assert!(f.x1 >= 0.0 && f.x1 <= 2.0);
        assert!(f.y1 >= 0.0 && f.y1 <= 2.0);
        assert!(f.x2 >= 10.0 && f.x2 <= 12.0);
        assert!(f.y2 >= 10.0 && f.y2 <= 12.0);
        assert!(f.score >= 0.0 && f.score <= 1.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let sets = vec![
            set_of(vec![bx(0.0, 0.5, 10.0, 10.25, 0.9, 0), bx(1.0, 1.0, 2.0, 2.0, 0.3, 2)], 3),
            DetectionSet { image_id: "other".into(), boxes: vec![bx(5.0, 5.0, 6.0, 6.0, 1.0, 1)], num_models: 3 },
        ];
        let mut buf = Vec::new();
        write_detections_jsonl(sets.iter(), &mut buf).unwrap();
        let back = read_detections_jsonl(&buf[..]).unwrap();
        assert_eq!(back, sets);
    }

    #[test]
    fn jsonl_rejects_invalid_boxes() {
        let line = br#"{"image_id":"a","x1":5.0,"y1":0.0,"x2":3.0,"y2":2.0,"score":0.5,"model_id":0,"label":0}"#;
        let err = read_detections_jsonl(&line[..]).unwrap_err();
        match err {
            EnsembleError::MalformedLine { line, msg } => {
                assert_eq!(line, 1);
                assert!(msg.contains("x1"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
