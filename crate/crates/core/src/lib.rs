//! Zero-shot temporal action detection on precomputed vision-language embeddings.
//!
//! The crate consumes per-frame visual embeddings and per-class text embeddings
//! and produces temporally localized, scored action detections without any
//! training. An optional test-time adaptation loop ([`tta`]) tunes two linear
//! projections per video before running the same detector.
//!
//! Module map:
//!
//! - [`store`]: binary feature containers and JSON annotation / prediction files.
//! - [`pipeline`]: pseudo-labelling, frame scoring, smoothing and segment merging.
//! - [`scoring`]: log-decay outer-inner-contrastive scores and spectral calibration.
//! - [`tta`]: projection adapter, sampling, self-supervised loss, Adam.
//! - [`eval`]: tIoU, average precision, mAP and the false-positive profile.
//! - [`synth`]: seeded synthetic corpora with exact ground truth.

pub mod error;
pub mod eval;
pub mod pipeline;
pub mod scoring;
pub mod store;
pub mod synth;
pub mod tta;

mod linalg;

pub use error::{Error, Result};
pub use pipeline::{detect, LabelMode, PipelineConfig, ScoreTrace, Segment, ThresholdPolicy};
pub use store::{AnnotationSet, Detection, FeatureMatrix, PromptBank};
