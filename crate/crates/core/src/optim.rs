//! AdamW with decoupled weight decay, global-norm gradient clipping, and a
//! linear-warmup + cosine-annealing learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_base: f64,
    pub lr_min: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
    pub max_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_base: 1e-4,
            lr_min: 1e-6,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_iters: 1000,
            total_iters: 2000,
            max_grad_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_min > 0.0
            && self.lr_min < self.lr_base
            && (0.0..1.0).contains(&self.betas.0)
            && (0.0..1.0).contains(&self.betas.1)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.max_grad_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Warmup length actually used: runs shorter than the configured warmup
    /// spend their first half warming up.
    pub fn effective_warmup(&self) -> u64 {
        if self.total_iters > self.warmup_iters {
            self.warmup_iters
        } else {
            (self.total_iters / 2).max(1)
        }
    }
}

/// Learning rate for 1-based iteration `step`.
///
/// Linear ramp `lr_base·step/warmup` up to `warmup` (so step 1 already trains),
/// then cosine decay reaching exactly `lr_min` at `total_iters`. Steps past the
/// end are clamped to `lr_min`.
pub fn lr_schedule(step: u64, cfg: &OptimConfig) -> f64 {
    let warmup = cfg.effective_warmup();
    let total = cfg.total_iters;
    if step > total {
        return cfg.lr_min;
    }
    if step <= warmup {
        return cfg.lr_base * (step.max(1) as f64 / warmup as f64);
    }
    if step == total {
        return cfg.lr_min;
    }
    let span = (total - warmup) as f64;
    let progress = (step - warmup) as f64 / span;
    cfg.lr_min + (cfg.lr_base - cfg.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimConfig,
    pub state: OptimState,
}

impl AdamW {
    pub fn new(config: OptimConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        AdamW {
            config,
            state: OptimState {
                step: 0,
                first_moment: zeros.clone(),
                second_moment: zeros,
            },
        }
    }

    /// Learning rate the next [`step`](Self::step) will use.
    pub fn next_lr(&self) -> f64 {
        lr_schedule(self.state.step + 1, &self.config)
    }

    /// Scales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
        let norm = params
            .iter()
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let scale = max_norm / (norm + 1e-6);
            for p in params.iter_mut() {
                if let Some(g) = p.tensor.grad_mut() {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        norm
    }

    /// One AdamW update at learning rate `lr`. Parameters with no gradient
    /// (unreachable from the loss) are treated as having a zero gradient.
    /// Nothing is written unless every updated value is finite.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(p) = params
            .iter()
            .find(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            return Err(Error::NonFinite(format!("gradient of parameter {}", p.name)));
        }
        let OptimConfig {
            betas: (b1, b2),
            eps,
            weight_decay,
            ..
        } = self.config;
        let t = (self.state.step + 1) as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let mut updated = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let mut m = self.state.first_moment[i].clone();
            let mut v = self.state.second_moment[i].clone();
            let mut data = p.tensor.data().to_vec();
            let grad = p.tensor.grad();
            let decay = if p.decay { weight_decay } else { 0.0 };
            for j in 0..data.len() {
                let g = grad.map_or(0.0, |g| g[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * decay * data[j];
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
            if data.iter().chain(&m).chain(&v).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("update of parameter {}", p.name)));
            }
            updated.push((data, m, v));
        }
        for (i, (p, (data, m, v))) in params.iter_mut().zip(updated).enumerate() {
            p.tensor.data_mut().copy_from_slice(&data);
            self.state.first_moment[i] = m;
            self.state.second_moment[i] = v;
        }
        self.state.step += 1;
        Ok(())
    }
}
