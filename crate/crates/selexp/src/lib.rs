//! Selective Shapley explanations for black-box tabular classifiers.
//!
//! The crate wires together five kinds of feature-attribution explainers behind
//! one contract: exact Shapley enumeration, two Monte Carlo estimators
//! (permutation sampling and kernel-weighted regression), a trained amortized
//! explainer that answers in a single forward pass, and a selective explainer
//! that dispatches between them. The selective explainer scores each input with
//! an uncertainty metric, serves low-uncertainty inputs from the amortized
//! network alone, and repairs the rest with an optimally weighted combination
//! of the amortized guess and a fresh Monte Carlo estimate.
//!
//! Modules follow the pipeline order:
//!
//! - [`data`]: feature vectors, dataset loading, splitting, standardization
//! - [`model`]: the counted black-box model contract and synthetic test models
//! - [`mlp`]: a small from-scratch multilayer perceptron (classifier/regressor)
//! - [`attribution`]: masking convention and the three reference explainers
//! - [`cache`]: append-only JSON-lines store for computed explanations
//! - [`amortize`]: amortized explainer training and seed ensembles
//! - [`uncertainty`]: uncertainty metrics, threshold calibration, selection
//! - [`combine`]: uncertainty bins, combination weights, the selective explainer
//! - [`eval`]: quality metrics and the evaluation protocols
//! - [`artifact`]: versioned JSON artifacts and content digests

pub mod amortize;
pub mod artifact;
pub mod attribution;
pub mod cache;
pub mod combine;
pub mod data;
pub mod eval;
pub mod mlp;
pub mod model;
pub mod rng;
pub mod uncertainty;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("split fractions {0:?} must be nonnegative and sum to 1")]
    BadFractions([f64; 3]),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("feature index {index} out of range for d={d}")]
    FeatureIndexOutOfRange { index: usize, d: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("exact enumeration refused for d={d} (guard at {guard}); pass an explicit override")]
    ExactGuard { d: usize, guard: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rank-deficient regression design; raise the inference count n")]
    RankDeficientDesign,

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("missing explanation target for input_id {0}")]
    MissingTarget(u64),

    #[error("duplicate cache key: input_id={input_id} method={method} seed={seed}")]
    DuplicateCacheKey {
        input_id: u64,
        method: String,
        seed: u64,
    },

    #[error("degenerate bin: zero combination-weight denominator")]
    DegenerateBin,

    #[error("policy is not calibrated")]
    UncalibratedPolicy,

    #[error("artifact digest mismatch for {path}: expected {expected}, found {actual}")]
    DigestMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("unsupported schema version {found} (supported: {supported})")]
    SchemaVersion { found: u32, supported: u32 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
