use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Moment buffers live in the [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub lr: f64,
    steps: u64,
    skipped: usize,
}

impl AdamW {
    pub fn new(config: AdamWConfig, lr: f64) -> Self {
        Self {
            config,
            lr,
            steps: 0,
            skipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates refused because a gradient was non-finite.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Clears the step counter and every moment buffer.
    pub fn reset(&mut self, params: &mut ParamStore<f64>, lr: f64) {
        params.reset_moments();
        self.steps = 0;
        self.lr = lr;
    }

    /// Applies one update. Parameters without a gradient entry only decay.
    /// Returns `false` (and changes nothing) if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<f64>, grads: &[(ParamId, Tensor<f64>)]) -> bool {
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("skipping optimizer step with non-finite gradient");
            return false;
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut by_id: Vec<Option<&Tensor<f64>>> = vec![None; params.len()];
        for (id, g) in grads {
            by_id[id.index()] = Some(g);
        }
        for (id, p) in params.iter_mut() {
            let decay = 1.0 - self.lr * c.weight_decay;
            let Some(g) = by_id[id.index()] else {
                p.value.data_mut().iter_mut().for_each(|v| *v *= decay);
                continue;
            };
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            let x = p.value.data_mut();
            for i in 0..x.len() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                x[i] = x[i] * decay - self.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        true
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor<f64>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}
