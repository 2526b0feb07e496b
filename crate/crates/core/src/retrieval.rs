//! Gallery ranking, Recall@k, mean reciprocal rank and chance baselines.

use std::fmt::Write as _;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{AlignmentModel, Batch, EmbedError};
use crate::modality::RetrievalTask;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("target index {index} outside gallery of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("no queries to aggregate")]
    EmptyQuerySet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

/// Aggregate metrics for one direction; all values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub task: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

impl RetrievalReport {
    /// Copy with every metric rounded to four decimals.
    pub fn rounded(&self) -> Self {
        Self {
            task: self.task.clone(),
            n: self.n,
            r1: round4(self.r1),
            r5: round4(self.r5),
            r10: round4(self.r10),
            map: round4(self.map),
        }
    }

    pub fn from_ranks(task: impl Into<String>, gallery: usize, ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            task: task.into(),
            n: gallery,
            r1: recall_at_k(ranks, 1)?,
            r5: recall_at_k(ranks, 5)?,
            r10: recall_at_k(ranks, 10)?,
            map: mean_ap(ranks)?,
        })
    }
}

/// Similarity rank of the true item, counting ties as ahead of it.
pub fn rank_of_target(zq: ArrayView1<'_, f64>, gallery: ArrayView2<'_, f64>, true_index: usize) -> Result<usize> {
    let len = gallery.nrows();
    if true_index >= len {
        return Err(RetrievalError::IndexOutOfRange { index: true_index, len });
    }
    if gallery.ncols() != zq.len() {
        return Err(RetrievalError::ShapeMismatch(format!(
            "query has {} dims, gallery {}",
            zq.len(),
            gallery.ncols()
        )));
    }
    let sims = gallery.dot(&zq);
    Ok(rank_in_scores(sims.view(), true_index))
}

fn rank_in_scores(scores: ArrayView1<'_, f64>, true_index: usize) -> usize {
    let own = scores[true_index];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != true_index && s >= own)
        .count()
}

/// Rank of target `i` for query `i`, for every query row.
pub fn paired_ranks(queries: ArrayView2<'_, f64>, gallery: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    if queries.dim() != gallery.dim() {
        return Err(RetrievalError::ShapeMismatch(format!(
            "queries {:?} vs gallery {:?}",
            queries.dim(),
            gallery.dim()
        )));
    }
    let sims = queries.dot(&gallery.t());
    Ok(sims.outer_iter().enumerate().map(|(i, row)| rank_in_scores(row, i)).collect())
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(RetrievalError::EmptyQuerySet);
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank as a percentage.
pub fn mean_ap(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(RetrievalError::EmptyQuerySet);
    }
    let sum: f64 = ranks.iter().map(|&r| 1.0 / r as f64).sum();
    Ok(100.0 * sum / ranks.len() as f64)
}

pub fn harmonic(n: usize) -> f64 {
    (1..=n).rev().map(|i| 1.0 / i as f64).sum()
}

/// Expected metrics when the true item's rank is uniform on `1..=n`.
pub fn chance_baseline(n: usize) -> RetrievalReport {
    let n = n.max(1);
    let nf = n as f64;
    let r = |k: usize| 100.0 * k.min(n) as f64 / nf;
    RetrievalReport {
        task: "chance".into(),
        n,
        r1: r(1),
        r5: r(5),
        r10: r(10),
        map: 100.0 * harmonic(n) / nf,
    }
}

/// Ranks every query's true partner against all `N` targets of `test`.
pub fn eval_task(model: &AlignmentModel, test: &Batch, task: RetrievalTask) -> Result<RetrievalReport> {
    if test.is_empty() {
        return Err(RetrievalError::EmptyQuerySet);
    }
    let zq = model.embed_side(test, task.query())?;
    let zt = model.embed_side(test, task.target())?;
    let ranks = paired_ranks(zq.view(), zt.view())?;
    RetrievalReport::from_ranks(task.to_string(), test.len(), &ranks)
}

pub fn eval_tasks(model: &AlignmentModel, test: &Batch, tasks: &[RetrievalTask]) -> Result<Vec<RetrievalReport>> {
    tasks.iter().map(|&t| eval_task(model, test, t)).collect()
}

/// One CSV row per report, metrics to four decimals.
pub fn reports_to_csv(reports: &[RetrievalReport]) -> String {
    let mut out = String::from("task,N,r1,r5,r10,map\n");
    for r in reports {
        let _ = writeln!(out, "{},{},{:.4},{:.4},{:.4},{:.4}", r.task, r.n, r.r1, r.r5, r.r10, r.map);
    }
    out
}
