//! Deterministic scaffolding for two-stage mitosis detection pipelines on
//! H&E histopathology images.
//!
//! The toolkit covers everything around the neural networks of a two-stage
//! detector, so that the full pipeline is runnable, reproducible and testable
//! without them:
//!
//! - [`stain`]: Macenko stain-vector estimation, deconvolution into
//!   per-stain concentration maps, reconstruction, and stochastic stain
//!   augmentation for domain generalization.
//! - [`tiling`]: splitting large images into fixed-size padded patches and
//!   mapping points and boxes between patch-local and image-global
//!   coordinates.
//! - [`folds`]: deterministic seeded k-fold partitioning of image ids.
//! - [`refdetect`]: a classical blob detector over hematoxylin
//!   concentrations, standing in for the first-stage network.
//! - [`ensemble`]: weighted boxes fusion of detections from multiple models.
//! - [`cascade`]: orchestration of the two-stage pipeline: tile, detect,
//!   fuse, crop, classify, threshold. Detector and classifier stages are
//!   pluggable adapters; external adapters are subprocesses speaking a
//!   documented file-exchange protocol.
//! - [`evaluate`]: point-based greedy matching and precision/recall/F1
//!   reporting.
//! - [`trainctl`]: cyclical learning-rate schedule, early-stopping state
//!   machine and the two loss formulas, for external trainers to reproduce
//!   the training protocol exactly.
//! - [`synthetic`]: generators for synthetic H&E-like fixtures used by the
//!   examples and test suites.
//!
//! Every operation is deterministic under a fixed seed. See the `examples/`
//! directory for one runnable example per capability, and the `mitokit`
//! binary for the command-line surface.

pub mod cascade;
pub mod cli;
pub mod ensemble;
pub mod evaluate;
pub mod folds;
pub mod refdetect;
pub mod stain;
pub mod synthetic;
pub mod tiling;
pub mod trainctl;

pub use ensemble::{DetectionBox, DetectionSet};
pub use stain::{OdImage, StainModel};
pub use tiling::{PatchGrid, PatchRef, PointAnnotation};

/// 8-bit RGB raster used throughout the toolkit.
///
/// Re-exported from the `image` crate; width and height are in pixels and
/// the pixel buffer is row-major RGB triples.
pub type RgbImage = image::RgbImage;
