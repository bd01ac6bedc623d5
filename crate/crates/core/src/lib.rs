//! Anomaly novel-class discovery at desk scale.
//!
//! The library trains a small anomaly-map-guided transformer encoder with a
//! von Mises–Fisher prototype head over a mix of labeled (base) and
//! unlabeled (novel) anomaly classes, estimates how many novel classes the
//! unlabeled pool contains, and scores held-out samples for
//! out-of-distribution rejection. Every analytic gradient is checked
//! against a finite-difference oracle; clustering metrics have brute-force
//! counterparts in the test suite.
//!
//! Modules map onto the pipeline:
//! - [`numerics`]: stable exp/log primitives, Bessel `I_ν`, the vMF
//!   normalizer, entropy, finite differences.
//! - [`data`]: dataset model, JSONL format, anomaly-map pooling, two-view
//!   augmentation, synthetic generators.
//! - [`encoder`]: the guided-attention transformer with analytic backward.
//! - [`proto`]: prototype set, vMF posterior, sharpening, teacher EMA.
//! - [`losses`]: pseudo-label correction and the six loss terms.
//! - [`trainer`]: the deterministic optimization loop and checkpoints.
//! - [`discovery`]: class-count estimation, Hungarian matching, clustering
//!   metrics, OOD scoring.

pub mod data;
pub mod discovery;
pub mod encoder;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod numerics;
pub mod parallel;
pub mod proto;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};

/// Version stamp embedded in reports and checkpoints.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
