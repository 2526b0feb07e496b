use super::model::AlignmentModel;
use super::{clamp_alpha, EmbedError, Gradients, Result};

/// Number of warmup steps: `ceil(fraction * total)`, at least one.
pub fn warmup_steps(total: usize, fraction: f64) -> usize {
    ((fraction * total as f64).ceil() as usize).clamp(1, total.max(1))
}

/// Learning rate at 1-based step `t`: linear warmup to `lr` at `t_w`, then
/// cosine decay reaching zero at `total`.
pub fn lr_at(lr: f64, t: usize, warmup: usize, total: usize) -> f64 {
    if t <= warmup {
        return lr * t as f64 / warmup as f64;
    }
    let progress = (t - warmup) as f64 / (total - warmup) as f64;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Biases and the temperature are not decayed.
fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

impl AdamW {
    pub fn new(model: &AlignmentModel, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let shapes: Vec<Vec<f64>> = model.params().iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut AlignmentModel, grads: &Gradients, lr: f64) -> Result<()> {
        let g = grads.params();
        if g.len() != self.m.len() {
            return Err(EmbedError::ShapeMismatch("gradient layout does not match optimizer state".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (name, p)) in model.params_mut().into_iter().enumerate() {
            let gi = g[i].1;
            if gi.len() != p.len() {
                return Err(EmbedError::ShapeMismatch(format!("gradient for `{name}` has the wrong length")));
            }
            let decay = if decays(&name) { lr * self.weight_decay } else { 0.0 };
            for (k, w) in p.iter_mut().enumerate() {
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi[k];
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi[k] * gi[k];
                *w -= decay * *w;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        model.alpha = clamp_alpha(model.alpha);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{ModelConfig, ALPHA_MAX};

    #[test]
    fn schedule_endpoints() {
        let (lr, total) = (1e-4, 200);
        let tw = warmup_steps(total, 0.05);
        assert_eq!(tw, 10);
        assert_eq!(lr_at(lr, tw, tw, total), lr);
        assert_eq!(lr_at(lr, total, tw, total), 0.0);
        assert!((lr_at(lr, 1, tw, total) - lr / 10.0).abs() < 1e-20);
        let mid = (tw + total) / 2;
        assert!((lr_at(lr, mid, tw, total) - lr * 0.5).abs() < 1e-12);
        assert_eq!(warmup_steps(7, 0.05), 1);
    }

    #[test]
    fn schedule_monotone_after_warmup() {
        let tw = warmup_steps(1000, 0.05);
        let lrs: Vec<f64> = (1..=1000).map(|t| lr_at(1.0, t, tw, 1000)).collect();
        assert!(lrs[..tw].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[tw - 1..].windows(2).all(|w| w[0] >= w[1]));
    }

    fn tiny() -> AlignmentModel {
        AlignmentModel::new(&ModelConfig {
            dim: 2,
            hidden: 2,
            pose_layers: 1,
            visual_dim: 2,
            tactile_dim: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // bias-corrected first step is g / (|g| + eps) ~ sign(g)
        let mut model = tiny();
        let before = model.clone();
        let mut g = Gradients::zeros_like(&model);
        g.0.visual.bias.fill(2.0);
        g.0.visual.weight.fill(-0.5);
        let mut opt = AdamW::new(&model, (0.9, 0.999), 1e-8, 0.0);
        opt.step(&mut model, &g, 1e-3).unwrap();
        for (a, b) in model.visual.bias.iter().zip(before.visual.bias.iter()) {
            assert!((a - (b - 1e-3)).abs() < 1e-9);
        }
        for (a, b) in model.visual.weight.iter().zip(before.visual.weight.iter()) {
            assert!((a - (b + 1e-3)).abs() < 1e-9);
        }
        assert_eq!(model.tactile, before.tactile);
    }

    #[test]
    fn decoupled_decay_shrinks_weights_only() {
        let mut model = tiny();
        let before = model.clone();
        let g = Gradients::zeros_like(&model);
        let mut opt = AdamW::new(&model, (0.9, 0.999), 1e-8, 0.01);
        opt.step(&mut model, &g, 0.5).unwrap();
        for (a, b) in model.visual.weight.iter().zip(before.visual.weight.iter()) {
            assert!((a - b * (1.0 - 0.005)).abs() < 1e-15);
        }
        assert_eq!(model.visual.bias, before.visual.bias);
        assert_eq!(model.alpha, before.alpha);
    }

    #[test]
    fn alpha_is_clamped() {
        let mut model = tiny();
        model.alpha = ALPHA_MAX - 1e-6;
        let mut g = Gradients::zeros_like(&model);
        g.0.alpha = -1.0;
        let mut opt = AdamW::new(&model, (0.9, 0.999), 1e-8, 0.01);
        opt.step(&mut model, &g, 0.1).unwrap();
        assert_eq!(model.alpha, ALPHA_MAX);
        g.0.alpha = 1e6;
        for _ in 0..200 {
            opt.step(&mut model, &g, 0.1).unwrap();
        }
        assert_eq!(model.alpha, 0.0);
    }
}
