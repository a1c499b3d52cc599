use super::{Result, TrainConfig, TrainError};
use crate::model::{ParamGrads, ParamStore};

/// Adam moments and per-parameter step counts.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            v: zeros.clone(),
            m: zeros,
            steps: vec![0; params.len()],
        }
    }

    /// Number of updates applied to parameter `index`.
    pub fn step_of(&self, index: usize) -> u64 {
        self.steps[index]
    }
}

/// One AdamW update with decoupled weight decay:
///
/// `p ← p − lr·wd·p` (only for parameters flagged for decay), then
/// `p ← p − lr · m̂ / (√v̂ + ε)` with bias-corrected moments.
///
/// Parameters that received no gradient in this step are left untouched.
pub fn adamw_step(params: &mut ParamStore, grads: &ParamGrads, state: &mut OptimState, cfg: &TrainConfig, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Shape(format!(
            "{} gradients and {} optimizer slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = grads.get(crate::model::ParamId(i)) else { continue };
        if g.len() != p.value.len() {
            return Err(TrainError::Shape(format!("gradient of {} has {} entries", p.name, g.len())));
        }
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let decay = if p.decay { lr * cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            *w -= decay * *w;
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak` over the first `warmup_ratio · total`
/// steps, then linear decay to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, peak: f64, warmup_ratio: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    let (s, n) = (step as f64, total as f64);
    let warm = warmup_ratio * n;
    if s < warm {
        peak * s / warm
    } else {
        peak * (n - s) / (n - warm)
    }
}
