use super::{ParamId, ParamStore};
use crate::error::{contract_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f32>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.96, eps: 1e-8, weight_decay: 0.045, clip_norm: Some(3.0) }
    }
}

/// AdamW with bias correction, decoupled weight decay and global-norm
/// gradient clipping. Gradients are read, never cleared.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| s.iter().map(|p| vec![0f32; p.value.numel()]).collect();
        Self { config, step: 0, first: zeros(store), second: zeros(store) }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Zero the moment estimates of scalars `range` of parameter `id`.
    pub fn reset_state(&mut self, id: ParamId, range: std::ops::Range<usize>) {
        self.first[id.0][range.clone()].fill(0.0);
        self.second[id.0][range].fill(0.0);
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(store: &ParamStore) -> f32 {
        let sq: f64 = store
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        sq.sqrt() as f32
    }

    /// One update at learning rate `lr`. Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) -> Result<f32> {
        if store.len() != self.first.len() {
            return contract_err("optimizer state does not match parameter store");
        }
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return contract_err(format!("parameter `{}` has no gradient", p.name));
        }
        let norm = Self::grad_norm(store);
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad.as_ref().expect("checked above");
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(norm)
    }
}

/// Linear warmup followed by cosine decay to zero at `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f32,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f32 {
        if self.warmup > 0 && step < self.warmup {
            return self.peak * (step + 1) as f32 / self.warmup as f32;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup.min(step)) as f32 / span as f32).min(1.0);
        self.peak * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
    }
}
