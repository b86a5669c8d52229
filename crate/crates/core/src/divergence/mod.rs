//! Explanation divergence: embeddings, dimensionality reduction, cross-model
//! distance vectors, intra-model group structure and KS significance.

mod cohesion;
mod distance;
mod ks;
mod matrix;
mod pca;
mod provider;
mod trust;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use cohesion::{cohesion_scores, CohesionMode};
pub use distance::{
    cos_dist, cross_model_distribution, intra_model_matrix, intra_model_summary, median, pca_cluster_models, scmd,
    sdv, GroupSummary, IntraModelMatrix, ModelPoint, SemanticDistanceVector,
};
pub use ks::{
    crossing_verdict, kolmogorov_sf, ks_all, ks_two_sample, significance_stars, Alternative, CrossingVerdict,
    KsResult, KsTriple,
};
pub use matrix::{EmbeddingMatrix, RowKey};
pub use pca::{fit_pca, fit_pca_lenient, reduce_pca, PcaFit};
pub use provider::{EmbedOutcome, Embedder, EmbeddingCache, EmbeddingProvider, HashingProvider, HttpEmbeddingProvider};
pub use trust::trustworthiness;

#[derive(Debug, Error)]
pub enum DivergenceError {
    #[error("row {row} has width {got}, expected {expected}")]
    RaggedRow { row: usize, expected: usize, got: usize },
    #[error("row {row} has a non-finite entry")]
    NonFinite { row: usize },
    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,
    #[error("models {a} and {b} share no posts")]
    EmptySharedSet { a: String, b: String },
    #[error("model {model} has more than one row for post {post_id}")]
    DuplicateRow { model: String, post_id: String },
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("need at least {needed} models, got {got}")]
    RosterTooSmall { needed: usize, got: usize },
    #[error("target dimension {target_dim} must be in 1..=min(rows - 1, width) for {rows} rows of width {width}")]
    InvalidDimension { target_dim: usize, rows: usize, width: usize },
    #[error("data has rank {achievable}, cannot project to {requested} dimensions")]
    RankDeficient { requested: usize, achievable: usize },
    #[error("k = {k} must satisfy 1 <= k < n/2 for n = {n}")]
    InvalidK { k: usize, n: usize },
    #[error("group of {size} rows is too small for k = {k}; use a smaller k")]
    GroupTooSmall { size: usize, k: usize },
    #[error("sample is empty")]
    EmptySample,
    #[error("no prediction for post {0}")]
    MissingPrediction(String),
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
}

impl DivergenceError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DivergenceError::Io { path: path.to_owned(), source }
    }
}
