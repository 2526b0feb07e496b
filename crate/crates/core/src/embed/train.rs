use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grad::{objective_impl, Dropout};
use super::model::{AlignmentModel, ModelConfig};
use super::optim::{lr_at, warmup_steps, AdamW};
use super::{Batch, EmbedError, PairedDataset, Result, ALPHA_INIT};
use crate::modality::RetrievalTask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    /// Overrides `epochs * ceil(N / batch_size)` when set.
    pub total_steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub dim: usize,
    pub hidden: usize,
    /// Pose MLP dropout probability; zero disables it.
    pub dropout: f64,
    pub tasks: Vec<RetrievalTask>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            warmup_fraction: 0.05,
            epochs: 10,
            total_steps: None,
            batch_size: 64,
            seed: 0,
            dim: 64,
            hidden: 128,
            dropout: 0.0,
            tasks: RetrievalTask::loss_pairings(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EmbedError::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("weight_decay must be non-negative and eps positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required");
        }
        if self.total_steps == Some(0) || (self.total_steps.is_none() && self.epochs == 0) {
            return bad("training needs at least one step");
        }
        Ok(())
    }

    pub fn steps_for(&self, n: usize) -> usize {
        self.total_steps.unwrap_or(self.epochs * n.div_ceil(self.batch_size))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AlignmentModel,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub step_losses: Vec<f64>,
}

/// Mean objective over consecutive chunks of `batch_size` samples.
pub fn evaluate_objective(model: &AlignmentModel, data: &Batch, tasks: &[RetrievalTask], batch_size: usize) -> Result<f64> {
    let n = data.len();
    let mut total = 0.0;
    let mut chunks = 0;
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let chunk = data.select(&idx);
        let mut loss = 0.0;
        for t in tasks {
            let zq = model.embed_side(&chunk, t.query())?;
            let zt = model.embed_side(&chunk, t.target())?;
            let s = super::similarity_matrix(zq.view(), zt.view(), model.tau())?;
            loss += super::infonce_loss(s.view())?;
        }
        total += loss / tasks.len() as f64;
        chunks += 1;
    }
    Ok(total / chunks.max(1) as f64)
}

/// Trains a fresh model on `data`. Deterministic for a given configuration.
pub fn train(data: &PairedDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(EmbedError::InvalidConfig("training needs at least two pairs".into()));
    }
    let mut model = AlignmentModel::new(&ModelConfig {
        dim: cfg.dim,
        hidden: cfg.hidden,
        pose_layers: 4,
        visual_dim: data.visual_dim(),
        tactile_dim: data.tactile_dim(),
        alpha: ALPHA_INIT,
        seed: cfg.seed,
    })?;
    model.pose.fit_standardization(data.samples.pose.view());
    let initial_loss = evaluate_objective(&model, &data.samples, &cfg.tasks, cfg.batch_size)?;

    let total = cfg.steps_for(n);
    let warmup = warmup_steps(total, cfg.warmup_fraction);
    let mut opt = AdamW::new(&model, cfg.betas, cfg.eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_5a5a);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut step_losses = Vec::with_capacity(total);
    for step in 1..=total {
        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(n);
        let batch = data.samples.select(&order[cursor..end]);
        cursor = end;
        let mut dropout = (cfg.dropout > 0.0).then_some(Dropout { p: cfg.dropout, rng: &mut rng });
        let (loss, grads) = match objective_impl(&model, &batch, &cfg.tasks, &mut dropout) {
            Ok(r) => r,
            Err(EmbedError::NonFinite(_)) => return Err(EmbedError::NonFiniteLoss { step }),
            Err(e) => return Err(e),
        };
        opt.step(&mut model, &grads, lr_at(cfg.lr, step, warmup, total))?;
        if !model.is_finite() {
            return Err(EmbedError::NonFiniteLoss { step });
        }
        step_losses.push(loss);
    }
    let final_loss = evaluate_objective(&model, &data.samples, &cfg.tasks, cfg.batch_size)?;
    Ok(TrainOutcome {
        model,
        steps: total,
        initial_loss,
        final_loss,
        step_losses,
    })
}
