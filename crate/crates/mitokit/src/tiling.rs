//! Fixed-size patch tiling with padding, and the coordinate bookkeeping
//! between patch-local and image-global space.
//!
//! Patches tile the image exactly (no overlap); edge patches whose valid
//! region is smaller than the patch shape are padded with white, matching
//! the slide background so downstream stain math sees no artificial tissue.
//! Boundary-straddling objects are split between patches; the tiler does
//! not merge detections across patch edges.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::DetectionBox;
use crate::RgbImage;

#[derive(Debug, Error)]
pub enum TilingError {
    #[error("image is {got_w}x{got_h} but the grid was planned for {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("patch {0} does not belong to this grid")]
    UnknownPatch(usize),
    #[error("expected {want} patches, got {got}")]
    PatchCountMismatch { want: usize, got: usize },
    #[error("malformed grid manifest line {line}: {msg}")]
    MalformedManifest { line: usize, msg: String },
    #[error("annotation csv: {0}")]
    AnnotationCsv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Patch shape in pixels. The conventional split for large histology
/// regions is 1536 rows by 2048 columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchShape {
    pub width: u32,
    pub height: u32,
}

impl Default for PatchShape {
    fn default() -> Self {
        Self { width: 2048, height: 1536 }
    }
}

/// One tile of a [`PatchGrid`]: global origin plus the unpadded extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRef {
    pub patch_id: usize,
    pub origin_x: u32,
    pub origin_y: u32,
    pub valid_width: u32,
    pub valid_height: u32,
}

/// Tiling plan: ceil-division grid of `patch`-shaped tiles over the image,
/// patch ids in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_width: u32,
    pub image_height: u32,
    pub patch: PatchShape,
    pub patches: Vec<PatchRef>,
}

/// Plan the tiling of a `image_width × image_height` image.
///
/// All dimensions must be at least 1. Last-row/column patches carry a valid
/// extent smaller than the patch shape when the image is not an exact
/// multiple.
pub fn plan_grid(image_width: u32, image_height: u32, patch: PatchShape) -> PatchGrid {
    assert!(image_width >= 1 && image_height >= 1, "image dimensions must be >= 1");
    assert!(patch.width >= 1 && patch.height >= 1, "patch dimensions must be >= 1");
    let cols = image_width.div_ceil(patch.width);
    let rows = image_height.div_ceil(patch.height);
    let mut patches = Vec::with_capacity((cols * rows) as usize);
    for row in 0..rows {
        for col in 0..cols {
            let origin_x = col * patch.width;
            let origin_y = row * patch.height;
            patches.push(PatchRef {
                patch_id: (row * cols + col) as usize,
                origin_x,
                origin_y,
                valid_width: patch.width.min(image_width - origin_x),
                valid_height: patch.height.min(image_height - origin_y),
            });
        }
    }
    PatchGrid {
        image_width,
        image_height,
        patch,
        patches,
    }
}

impl PatchGrid {
    fn check_image(&self, img: &RgbImage) -> Result<(), TilingError> {
        if img.width() != self.image_width || img.height() != self.image_height {
            return Err(TilingError::DimensionMismatch {
                got_w: img.width(),
                got_h: img.height(),
                want_w: self.image_width,
                want_h: self.image_height,
            });
        }
        Ok(())
    }

    /// Cut one patch out of the image, white-padding beyond the valid extent.
    pub fn extract_patch(&self, img: &RgbImage, r: &PatchRef) -> Result<RgbImage, TilingError> {
        self.check_image(img)?;
        if self.patches.get(r.patch_id) != Some(r) {
            return Err(TilingError::UnknownPatch(r.patch_id));
        }
        let mut out = RgbImage::from_pixel(self.patch.width, self.patch.height, image::Rgb([255, 255, 255]));
        for y in 0..r.valid_height {
            for x in 0..r.valid_width {
                out.put_pixel(x, y, *img.get_pixel(r.origin_x + x, r.origin_y + y));
            }
        }
        Ok(out)
    }

    /// All patches in patch-id order.
    pub fn extract_all(&self, img: &RgbImage) -> Result<Vec<RgbImage>, TilingError> {
        self.patches.iter().map(|r| self.extract_patch(img, r)).collect()
    }

    /// Reassemble the original image from patches in patch-id order,
    /// discarding padding. Exact inverse of [`PatchGrid::extract_all`].
    pub fn stitch(&self, patches: &[RgbImage]) -> Result<RgbImage, TilingError> {
        if patches.len() != self.patches.len() {
            return Err(TilingError::PatchCountMismatch {
                want: self.patches.len(),
                got: patches.len(),
            });
        }
        let mut out = RgbImage::new(self.image_width, self.image_height);
        for (r, p) in self.patches.iter().zip(patches) {
            if p.width() != self.patch.width || p.height() != self.patch.height {
                return Err(TilingError::DimensionMismatch {
                    got_w: p.width(),
                    got_h: p.height(),
                    want_w: self.patch.width,
                    want_h: self.patch.height,
                });
            }
            for y in 0..r.valid_height {
                for x in 0..r.valid_width {
                    out.put_pixel(r.origin_x + x, r.origin_y + y, *p.get_pixel(x, y));
                }
            }
        }
        Ok(out)
    }

    /// Serialize as a line-oriented text manifest.
    pub fn write_manifest<W: Write>(&self, mut w: W) -> Result<(), TilingError> {
        writeln!(w, "image {} {}", self.image_width, self.image_height)?;
        writeln!(w, "patch {} {}", self.patch.width, self.patch.height)?;
        for r in &self.patches {
            writeln!(
                w,
                "{} {} {} {} {}",
                r.patch_id, r.origin_x, r.origin_y, r.valid_width, r.valid_height
            )?;
        }
        Ok(())
    }

    pub fn write_manifest_file(&self, path: &Path) -> Result<(), TilingError> {
        let f = std::fs::File::create(path)?;
        self.write_manifest(std::io::BufWriter::new(f))
    }

    pub fn read_manifest<R: BufRead>(r: R) -> Result<Self, TilingError> {
        let mut image_dims: Option<(u32, u32)> = None;
        let mut patch_dims: Option<(u32, u32)> = None;
        let mut patches = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| TilingError::MalformedManifest {
                line: n + 1,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["image", w, h] => {
                    image_dims = Some((
                        w.parse().map_err(|_| bad("bad image width"))?,
                        h.parse().map_err(|_| bad("bad image height"))?,
                    ));
                }
                ["patch", w, h] => {
                    patch_dims = Some((
                        w.parse().map_err(|_| bad("bad patch width"))?,
                        h.parse().map_err(|_| bad("bad patch height"))?,
                    ));
                }
                [id, ox, oy, vw, vh] => {
                    patches.push(PatchRef {
                        patch_id: id.parse().map_err(|_| bad("bad patch id"))?,
                        origin_x: ox.parse().map_err(|_| bad("bad origin x"))?,
                        origin_y: oy.parse().map_err(|_| bad("bad origin y"))?,
                        valid_width: vw.parse().map_err(|_| bad("bad valid width"))?,
                        valid_height: vh.parse().map_err(|_| bad("bad valid height"))?,
                    });
                }
                _ => return Err(bad("unrecognized line")),
            }
        }
        let (image_width, image_height) =
            image_dims.ok_or_else(|| TilingError::MalformedManifest {
                line: 0,
                msg: "missing image line".into(),
            })?;
        let (pw, ph) = patch_dims.ok_or_else(|| TilingError::MalformedManifest {
            line: 0,
            msg: "missing patch line".into(),
        })?;
        Ok(Self {
            image_width,
            image_height,
            patch: PatchShape { width: pw, height: ph },
            patches,
        })
    }

    pub fn read_manifest_file(path: &Path) -> Result<Self, TilingError> {
        let f = std::fs::File::open(path)?;
        Self::read_manifest(std::io::BufReader::new(f))
    }
}

/// Ground-truth point label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationLabel {
    Mitosis,
    HardNegative,
}

/// Expert point annotation in image-global coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub image_id: String,
    pub x: u32,
    pub y: u32,
    pub label: AnnotationLabel,
}

/// Map a global point into a patch's local frame, if it lies in the valid
/// (unpadded) region.
pub fn to_local(p: &PointAnnotation, r: &PatchRef) -> Option<(u32, u32)> {
    let in_x = p.x >= r.origin_x && p.x < r.origin_x + r.valid_width;
    let in_y = p.y >= r.origin_y && p.y < r.origin_y + r.valid_height;
    if in_x && in_y {
        Some((p.x - r.origin_x, p.y - r.origin_y))
    } else {
        None
    }
}

/// Shift a patch-local detection box into image-global coordinates.
/// Score, label and provenance are preserved.
pub fn to_global(b: &DetectionBox, r: &PatchRef) -> DetectionBox {
    DetectionBox {
        x1: b.x1 + r.origin_x as f64,
        y1: b.y1 + r.origin_y as f64,
        x2: b.x2 + r.origin_x as f64,
        y2: b.y2 + r.origin_y as f64,
        ..*b
    }
}

/// Read a point-annotation CSV with header `image_id,x,y,label`.
pub fn read_annotations_csv<R: std::io::Read>(r: R) -> Result<Vec<PointAnnotation>, TilingError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let ann: PointAnnotation = rec.map_err(|e| TilingError::AnnotationCsv(e.to_string()))?;
        out.push(ann);
    }
    Ok(out)
}

pub fn read_annotations_file(path: &Path) -> Result<Vec<PointAnnotation>, TilingError> {
    let f = std::fs::File::open(path)?;
    read_annotations_csv(std::io::BufReader::new(f))
}

/// Write annotations in the same CSV format.
pub fn write_annotations_csv<W: Write>(anns: &[PointAnnotation], w: W) -> Result<(), TilingError> {
    let mut wtr = csv::Writer::from_writer(w);
    for a in anns {
        wtr.serialize(a).map_err(|e| TilingError::AnnotationCsv(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_annotations_file(anns: &[PointAnnotation], path: &Path) -> Result<(), TilingError> {
    let f = std::fs::File::create(path)?;
    write_annotations_csv(anns, std::io::BufWriter::new(f))
}
