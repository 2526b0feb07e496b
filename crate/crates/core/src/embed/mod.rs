//! Shared tri-modal embedding space: normalization, temperature-scaled
//! similarity, symmetric InfoNCE, the encoders and fusion layers, manual
//! reverse-mode gradients and the AdamW training loop.

mod data;
mod grad;
mod model;
mod optim;
mod train;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

pub use data::{Batch, PairedDataset};
pub use grad::{loss_and_grads, objective_and_grads, Gradients};
pub use model::{AlignmentModel, Dense, ModelConfig, PoseEncoder, CHECKPOINT_FORMAT};
pub use optim::{lr_at, warmup_steps, AdamW};
pub use train::{evaluate_objective, train, TrainConfig, TrainOutcome};

/// Initial log inverse temperature, `ln(1 / 0.07)`.
pub const ALPHA_INIT: f64 = 2.659_260_036_932_778_4;
/// Upper clamp for alpha, `ln 100` (tau = 0.01).
pub const ALPHA_MAX: f64 = 4.605_170_185_988_092;
pub const POSE_DIM: usize = 14;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected input dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("frame stack is empty")]
    EmptyStack,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("model has no fusion layer for {0}")]
    MissingFusionParameters(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = EmbedError> = std::result::Result<T, E>;

/// A unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Array1<f64>);

impl Embedding {
    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

pub fn l2_normalize(v: ArrayView1<'_, f64>) -> Result<Embedding> {
    let norm = v.dot(&v).sqrt();
    if !norm.is_finite() {
        return Err(EmbedError::NonFinite("vector"));
    }
    if norm == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok(Embedding(v.mapv(|x| x / norm)))
}

/// Row-wise L2 normalization; also returns the pre-normalization norms.
pub(crate) fn normalize_rows(u: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = u.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|n| !n.is_finite()) {
        return Err(EmbedError::NonFinite("embedding"));
    }
    if norms.iter().any(|&n| n == 0.0) {
        return Err(EmbedError::ZeroVector);
    }
    let z = u / &norms.view().insert_axis(Axis(1));
    Ok((z, norms))
}

pub fn clamp_alpha(alpha: f64) -> f64 {
    alpha.clamp(0.0, ALPHA_MAX)
}

/// `tau = exp(-clamp(alpha, 0, ln 100))`, always in `[0.01, 1]`.
pub fn temperature(alpha: f64) -> f64 {
    (-clamp_alpha(alpha)).exp()
}

/// `S_ij = (zq_i . zt_j) / tau`.
pub fn similarity_matrix(zq: ArrayView2<'_, f64>, zt: ArrayView2<'_, f64>, tau: f64) -> Result<Array2<f64>> {
    if zq.dim() != zt.dim() {
        return Err(EmbedError::ShapeMismatch(format!(
            "query {:?} vs target {:?}",
            zq.dim(),
            zt.dim()
        )));
    }
    Ok(zq.dot(&zt.t()) / tau)
}

/// Symmetric InfoNCE over a square logit matrix with positives on the diagonal.
pub fn infonce_loss(s: ArrayView2<'_, f64>) -> Result<f64> {
    infonce_with_grad(s).map(|(l, _)| l)
}

/// Loss and `dL/dS`, with max-subtracted softmax in both directions.
pub(crate) fn infonce_with_grad(s: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    let (b, b2) = s.dim();
    if b != b2 || b == 0 {
        return Err(EmbedError::ShapeMismatch(format!("logits must be square and non-empty, got {:?}", s.dim())));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(EmbedError::NonFinite("similarity matrix"));
    }
    let bf = b as f64;
    let mut grad = Array2::zeros((b, b));
    let mut row_loss = 0.0;
    for (i, row) in s.rows().into_iter().enumerate() {
        let (lse, probs) = softmax(row);
        row_loss += lse - row[i];
        for (j, p) in probs.into_iter().enumerate() {
            grad[[i, j]] += 0.5 * p / bf;
        }
        grad[[i, i]] -= 0.5 / bf;
    }
    let mut col_loss = 0.0;
    for (j, col) in s.columns().into_iter().enumerate() {
        let (lse, probs) = softmax(col);
        col_loss += lse - col[j];
        for (i, p) in probs.into_iter().enumerate() {
            grad[[i, j]] += 0.5 * p / bf;
        }
        grad[[j, j]] -= 0.5 / bf;
    }
    Ok((0.5 * (row_loss / bf + col_loss / bf), grad))
}

/// Log-sum-exp and probabilities of one logit vector.
fn softmax(x: ArrayView1<'_, f64>) -> (f64, Vec<f64>) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (max + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}
