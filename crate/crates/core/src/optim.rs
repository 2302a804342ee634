//! AdamW with decoupled weight decay, global-norm clipping and warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length in steps; the rate is constant afterwards.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 200,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamWConfig {
    /// Learning rate applied at optimizer step `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// First and second moments for every parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update. Parameters without a gradient are treated as having
    /// a zero gradient; non-trainable parameters are never touched.
    ///
    /// Fails without modifying anything if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore) -> Result<StepReport> {
        for (id, g) in grads.iter() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", store.get(id).name)));
            }
        }
        let norm = grads.global_norm();
        let clip = match self.config.clip_norm {
            Some(max) if (norm as f64) > max => (max / norm as f64) as Float,
            _ => 1.0,
        };
        let lr = self.config.lr_at(self.step) as Float;
        let (b1, b2) = (self.config.beta1 as Float, self.config.beta2 as Float);
        let eps = self.config.eps as Float;
        let wd = self.config.weight_decay as Float;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let g = grads.get(id);
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let w = param.tensor.data_mut();
            for i in 0..w.len() {
                let gi = g.map_or(0.0, |g| g[i] * clip);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * wd * w[i];
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(StepReport { grad_norm: norm as f64, lr: lr as f64 })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub grad_norm: f64,
    pub lr: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: Float) -> (ParamStore, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::new(vec![1], vec![w]).unwrap()).unwrap();
        (s, id)
    }

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig { lr, weight_decay: wd, warmup_steps: 0, clip_norm: None, ..Default::default() }
    }

    #[test]
    fn zero_gradient_no_decay_is_null_update() {
        let (mut s, id) = scalar_store(0.7);
        let mut st = AdamWState::new(cfg(0.1, 0.0), &s);
        let mut g = GradStore::new(&s);
        g.accumulate(id, &[0.0], 1.0);
        st.step(&mut s, &g).unwrap();
        assert_eq!(s.tensor(id).data(), &[0.7]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = AdamWState::new(cfg(0.1, 0.0), &s);
        let mut g = GradStore::new(&s);
        g.accumulate(id, &[1.0], 1.0);
        st.step(&mut s, &g).unwrap();
        // m = 0.1, v = 0.001, mhat = 1, vhat = 1, w = 1 - 0.1 * 1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.tensor(id).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn decay_only_shrinks_weights() {
        let (mut s, id) = scalar_store(2.0);
        let mut st = AdamWState::new(cfg(0.1, 0.01), &s);
        let g = GradStore::new(&s);
        st.step(&mut s, &g).unwrap();
        assert!((s.tensor(id).data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_and_names_parameter() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = AdamWState::new(cfg(0.1, 0.0), &s);
        let mut g = GradStore::new(&s);
        g.accumulate(id, &[Float::NAN], 1.0);
        let err = st.step(&mut s, &g).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(st.step, 0);
        assert_eq!(s.tensor(id).data(), &[1.0]);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let (mut s, id) = scalar_store(1.0);
        s.set_trainable(id, false);
        let mut st = AdamWState::new(cfg(0.1, 0.5), &s);
        let mut g = GradStore::new(&s);
        g.accumulate(id, &[3.0], 1.0);
        st.step(&mut s, &g).unwrap();
        assert_eq!(s.tensor(id).data(), &[1.0]);
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        let c = AdamWConfig { warmup_steps: 4, lr: 1.0, ..Default::default() };
        assert_eq!(c.lr_at(0), 0.25);
        assert_eq!(c.lr_at(3), 1.0);
        assert_eq!(c.lr_at(100), 1.0);
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let (mut s, id) = scalar_store(0.0);
        let c = AdamWConfig { clip_norm: Some(1.0), ..cfg(0.1, 0.0) };
        let mut st = AdamWState::new(c, &s);
        let mut g = GradStore::new(&s);
        g.accumulate(id, &[10.0], 1.0);
        let r = st.step(&mut s, &g).unwrap();
        assert_eq!(r.grad_norm, 10.0);
        // After clipping g = 1, so the update matches the unclipped unit case.
        assert!((s.tensor(id).data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    }
}
