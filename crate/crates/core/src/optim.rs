//! Adam with bias correction, and global-norm gradient clipping.

use punchline_autograd::Matrix;
use serde::{Deserialize, Serialize};

use crate::nn::{Param, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self { config, step: 0, first: zeros(), second: zeros() }
    }

    /// One update. Parameters without a gradient, or for which `frozen`
    /// holds, keep their values and moments.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Matrix>], frozen: impl Fn(&Param) -> bool) {
        self.step += 1;
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps } = self.config;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = grads.get(i).and_then(Option::as_ref) else { continue };
            if frozen(store.param(id)) {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let p = store.value_mut(id);
            for (((pk, mk), vk), gk) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mk = b1 * *mk + (1.0 - b1) * gk;
                *vk = b2 * *vk + (1.0 - b2) * gk * gk;
                let m_hat = *mk / c1;
                let v_hat = *vk / c2;
                *pk -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm across all present gradients.
pub fn global_norm(grads: &[Option<Matrix>]) -> f64 {
    grads.iter().flatten().map(Matrix::sum_squares).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Matrix>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }
    norm
}
