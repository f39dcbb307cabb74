//! Token-level explanations learned from transformer attention.
//!
//! The crate reads attention traces (the final-layer attention to and from
//! the aggregation token, per head, for each classified example), trains a
//! small network that maps those attention features to token importance,
//! and evaluates any explainer's word-level rationales against human ones.
//!
//! Modules follow the pipeline:
//!
//! - [`trace`]: the interchange format, validation and manifests
//! - [`features`]: per-token feature vectors and label projection
//! - [`expnet`]: the network, focal loss, training and inference
//! - [`baseline`]: top-K binarization, score files, random baseline
//! - [`metrics`]: micro P/R/F1, pooled AUROC/AUPR, bootstrap, Krippendorff's alpha
//! - [`harness`]: experiments, leave-one-task-out runs and reports
//! - [`synthetic`]: traces with a planted importance rule, for tests

pub mod baseline;
pub mod error;
pub mod expnet;
pub mod features;
pub mod harness;
mod jsonl;
pub mod metrics;
pub mod synthetic;
pub mod trace;

pub use baseline::{Explanation, Granularity, ScoreRecord};
pub use error::{Error, Invariant, Result};
pub use expnet::{ExpNetModel, TrainingConfig, TrainingSet};
pub use features::{FeatureMask, LabeledToken, TokenFeatureVector};
pub use harness::{ExperimentSpec, MergePolicy, MergedRationale};
pub use jsonl::FORMAT_VERSION;
pub use metrics::{ConfusionCounts, EvalReport};
pub use trace::{AttentionTrace, DatasetManifest, Split};
