//! Classical candidate detector over hematoxylin concentrations.
//!
//! Mitotic figures are nuclear events, so candidates are dense hematoxylin
//! blobs: the image is deconvolved, the hematoxylin channel thresholded,
//! and 4-connected components within an area window become boxes. This is
//! the built-in stand-in for a trained first-stage detector; it exists so
//! the fusion, cascade and evaluation machinery can run end to end, not to
//! match neural recall.

use serde::{Deserialize, Serialize};

use crate::ensemble::{DetectionBox, DetectionSet};
use crate::stain::{deconvolve, ConcentrationMap, StainError, StainModel};
use crate::RgbImage;

/// Blob detector thresholds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BlobParams {
    /// Minimum hematoxylin concentration for a pixel to join a blob.
    pub conc_threshold: f64,
    /// Smallest accepted component area in pixels.
    pub min_area: usize,
    /// Largest accepted component area in pixels.
    pub max_area: usize,
    /// Scores are `min(1, mean component concentration × score_scale)`.
    pub score_scale: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            conc_threshold: 0.5,
            min_area: 40,
            max_area: 5000,
            score_scale: 0.5,
        }
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            // path halving
            self.parent[x as usize] = self.parent[self.parent[x as usize] as usize];
            x = self.parent[x as usize];
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            // deterministic: smaller root wins
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

#[derive(Clone)]
struct Component {
    min_x: u32,
    min_y: u32,
    max_x: u32,
    max_y: u32,
    area: usize,
    conc_sum: f64,
}

/// Detect candidate boxes as thresholded hematoxylin components.
///
/// Components are 4-connected; those with area inside
/// `[min_area, max_area]` become their bounding boxes (exclusive right and
/// bottom edges), scored by mean concentration. Output is ordered by the
/// first pixel of each component in row-major scan order, so detection is
/// deterministic.
pub fn detect_candidates(
    image_id: &str,
    img: &RgbImage,
    model: &StainModel,
    params: &BlobParams,
) -> Result<DetectionSet, StainError> {
    let conc = deconvolve(img, model)?;
    Ok(detect_in_concentrations(image_id, &conc, params))
}

/// Same as [`detect_candidates`] but over an existing concentration map.
pub fn detect_in_concentrations(
    image_id: &str,
    conc: &ConcentrationMap,
    params: &BlobParams,
) -> DetectionSet {
    let w = conc.width() as usize;
    let h = conc.height() as usize;
    let mask: Vec<bool> = (0..w * h)
        .map(|i| conc.stain_at(i, 0) >= params.conc_threshold)
        .collect();

    // two-pass 4-connected labeling with union-find over pixel indices
    let mut uf = UnionFind::new(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            if x > 0 && mask[i - 1] {
                uf.union(i as u32, (i - 1) as u32);
            }
            if y > 0 && mask[i - w] {
                uf.union(i as u32, (i - w) as u32);
            }
        }
    }

    // accumulate per-root stats; roots keyed by first pixel in scan order
    let mut comp_index: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    let mut order: Vec<u32> = Vec::new();
    let mut comps: Vec<Component> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            let root = uf.find(i as u32);
            let idx = *comp_index.entry(root).or_insert_with(|| {
                order.push(root);
                comps.push(Component {
                    min_x: x as u32,
                    min_y: y as u32,
                    max_x: x as u32,
                    max_y: y as u32,
                    area: 0,
                    conc_sum: 0.0,
                });
                comps.len() - 1
            });
            let c = &mut comps[idx];
            c.min_x = c.min_x.min(x as u32);
            c.min_y = c.min_y.min(y as u32);
            c.max_x = c.max_x.max(x as u32);
            c.max_y = c.max_y.max(y as u32);
            c.area += 1;
            c.conc_sum += conc.stain_at(i, 0);
        }
    }

    let mut set = DetectionSet::new(image_id);
    for c in &comps {
        if c.area < params.min_area || c.area > params.max_area {
            continue;
        }
        let score = (c.conc_sum / c.area as f64 * params.score_scale).min(1.0);
        set.boxes.push(DetectionBox {
            x1: c.min_x as f64,
            y1: c.min_y as f64,
            x2: (c.max_x + 1) as f64,
            y2: (c.max_y + 1) as f64,
            score,
            model_id: 0,
            label: 0,
        });
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{
        render_from_concentrations, RUIFROK_EOSIN, RUIFROK_HEMATOXYLIN,
    };
    use crate::stain::estimate_stain_model;
    use crate::stain::MacenkoConfig;

    fn model() -> StainModel {
        StainModel {
            stain_vectors: [RUIFROK_HEMATOXYLIN, RUIFROK_EOSIN],
            max_concentrations: [1.0, 1.0],
        }
    }

    /// Render squares of hematoxylin at given (x0, y0, side, conc).
    fn squares_image(w: u32, h: u32, squares: &[(u32, u32, u32, f64)]) -> RgbImage {
        let mut conc = vec![0.0f64; (w as usize) * (h as usize) * 2];
        for &(x0, y0, side, c) in squares {
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    conc[((y * w + x) as usize) * 2] = c;
                }
            }
        }
        render_from_concentrations(w, h, &model(), &conc)
    }

    #[test]
    fn blank_image_yields_nothing() {
        let img = RgbImage::from_pixel(64, 64, image::Rgb([255, 255, 255]));
        let out = detect_candidates("blank", &img, &model(), &BlobParams::default()).unwrap();
        assert!(out.boxes.is_empty());
    }

    #[test]
    fn single_square_gives_its_bounds() {
        let img = squares_image(128, 96, &[(30, 40, 20, 1.2)]);
        let out = detect_candidates("sq", &img, &model(), &BlobParams::default()).unwrap();
        assert_eq!(out.boxes.len(), 1);
        let b = out.boxes[0];
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (30.0, 40.0, 50.0, 60.0));
        assert!(b.score > 0.0 && b.score <= 1.0);
        // mean conc ~1.2, scale 0.5
        assert!((b.score - 0.6).abs() < 0.02, "score {}", b.score);
    }

    #[test]
    fn area_window_filters_small_components() {
        // 20x20 square plus a 5x5 square below min_area = 40
        let img = squares_image(128, 96, &[(10, 10, 20, 1.0), (80, 60, 5, 1.0)]);
        let out = detect_candidates("two", &img, &model(), &BlobParams::default()).unwrap();
        assert_eq!(out.boxes.len(), 1);
        assert_eq!(out.boxes[0].x1, 10.0);

        // and max_area drops huge components
        let big = squares_image(128, 96, &[(0, 0, 80, 1.0)]);
        let none = detect_candidates("big", &big, &model(), &BlobParams::default()).unwrap();
        assert!(none.boxes.is_empty(), "6400 px > max_area");
    }

    #[test]
    fn translation_equivariance() {
        let base = squares_image(160, 120, &[(30, 40, 16, 1.1), (90, 20, 12, 0.9)]);
        let shifted = squares_image(160, 120, &[(41, 57, 16, 1.1), (101, 37, 12, 0.9)]);
        let p = BlobParams { min_area: 40, ..Default::default() };
        let a = detect_candidates("a", &base, &model(), &p).unwrap();
        let b = detect_candidates("b", &shifted, &model(), &p).unwrap();
        assert_eq!(a.boxes.len(), b.boxes.len());
        for (ba, bb) in a.boxes.iter().zip(&b.boxes) {
            assert_eq!(ba.x1 + 11.0, bb.x1);
            assert_eq!(ba.y1 + 17.0, bb.y1);
            assert_eq!(ba.x2 + 11.0, bb.x2);
            assert_eq!(ba.y2 + 17.0, bb.y2);
        }
    }

    #[test]
    fn diagonal_blobs_are_separate_components() {
        // two squares touching only at a corner: 4-connectivity keeps them apart
        let img = squares_image(64, 64, &[(10, 10, 8, 1.0), (18, 18, 8, 1.0)]);
        let p = BlobParams { min_area: 10, ..Default::default() };
        let out = detect_candidates("diag", &img, &model(), &p).unwrap();
        assert_eq!(out.boxes.len(), 2);
    }

    #[test]
    fn boxes_stay_in_bounds_with_estimated_model() {
        // same scene, but the model comes from estimation rather than truth
        let squares = vec![(4u32, 4u32, 16u32, 1.2f64), (100, 70, 20, 0.8)];
        // eosin anchor so estimation is non-degenerate: painted manually below
        let w = 128u32;
        let h = 96u32;
        let mut conc = vec![0.0f64; (w as usize) * (h as usize) * 2];
        for &(x0, y0, side, c) in &squares {
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    conc[((y * w + x) as usize) * 2] = c;
                }
            }
        }
        for y in 40..60u32 {
            for x in 40..90u32 {
                conc[((y * w + x) as usize) * 2 + 1] = 0.9;
            }
        }
        let img = render_from_concentrations(w, h, &model(), &conc);
        let est = estimate_stain_model(&img, &MacenkoConfig::default()).unwrap();
        let out = detect_candidates("est", &img, &est, &BlobParams::default()).unwrap();
        assert_eq!(out.boxes.len(), 2);
        for b in &out.boxes {
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0);
            assert!(b.x2 <= w as f64 && b.y2 <= h as f64);
            assert!(b.score > 0.0 && b.score <= 1.0);
        }
    }
}
