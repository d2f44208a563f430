//! Evaluation and simulation toolkit for a camera-equipped, solar-powered
//! insect trap.
//!
//! The crate has four concerns, one module each plus shared plumbing:
//!
//! - [`dataset`]: annotated-image manifests, detection files, deterministic
//!   train/test splits.
//! - [`metrics`]: IoU, greedy detection/ground-truth matching, and
//!   precision / recall / F1 / AP / mean-IoU reports at configurable IoU
//!   thresholds.
//! - [`disturbance`]: deterministic synthesis of blurry, salt-pepper, dust,
//!   and flare test sets from an original dataset.
//! - [`bench`]: throughput measurement of an arbitrary external detector
//!   driven over a line-delimited stdin/stdout protocol.
//! - [`trapsim`]: discrete-time simulation of the trap's solar charging,
//!   voltage-gated detection loop, sensor logging, and notifications.
//! - [`report`]: CSV emission and grouped-bar SVG charts for the above.
//!
//! All randomized behavior runs on the seeded generator in [`rng`], so
//! identical seeds produce byte-identical outputs across runs and platforms.

pub mod bench;
pub mod dataset;
pub mod disturbance;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod trapsim;

pub use dataset::{AnnotatedImage, BoundingBox, Dataset, Detection, DetectionRecord, Provenance};
pub use metrics::{ConfusionCounts, EvalReport, MatchResult};
