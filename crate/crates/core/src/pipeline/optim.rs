//! AdamW with decoupled weight decay, and the warm-up + cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pipeline::config::OptimConfig;

/// Learning rate at zero-based `step` of `total`: linear warm-up over the
/// first `ceil(warmup_fraction·total)` steps, then cosine decay to zero.
pub fn lr_at(config: &OptimConfig, step: u64, total: u64) -> f64 {
    let warmup = (config.warmup_fraction * total as f64).ceil() as u64;
    if step < warmup {
        return config.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    config.lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Optimizer state for every parameter of one store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    config: OptimConfig,
    names: Vec<String>,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: &OptimConfig, store: &ParamStore) -> Self {
        let names = store.ids().map(|id| store.name(id).to_string()).collect();
        let zeros = || store.ids().map(|id| vec![0.0; store.value(id).numel()]).collect();
        Self { config: config.clone(), names, t: 0, m: zeros(), v: zeros() }
    }

    /// Names of the parameters this optimizer updates.
    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Applies one update from the store's accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if store.len() != self.names.len() {
            return Err(Error::Invalid("optimizer built for a different parameter store".into()));
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let decay = if store.decays(id) { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let (theta, grad) = store.value_and_grad_mut(id);
            for j in 0..theta.len() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                theta[j] -= lr * (update + decay * theta[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use repre_tensor::Tensor;

    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = OptimConfig::default();
        assert!((lr_at(&cfg, 0, 100) - 0.2e-3).abs() < 1e-18);
        assert_eq!(lr_at(&cfg, 4, 100), 1e-3);
        assert_eq!(lr_at(&cfg, 5, 100), 1e-3);
        assert!(lr_at(&cfg, 52, 100) < 0.51e-3);
        assert!(lr_at(&cfg, 99, 100) < 1e-5);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(&[1.0, -2.0]), false).unwrap();
        let mut tape = repre_tensor::Tape::new();
        let p = store.bind(&mut tape, true);
        let sq = tape.mul(p[id], p[id]).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        store.accumulate_grads(&tape, &p);
        let mut opt = AdamW::new(&OptimConfig::default(), &store);
        opt.step(&mut store, 0.1).unwrap();
        let x = store.value(id).data();
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2, 2], vec![0.3, -0.1, 2.0, 5.0]).unwrap(), true).unwrap();
        let before = store.value(id).clone();
        let mut opt = AdamW::new(&OptimConfig::default(), &store);
        opt.step(&mut store, 0.0).unwrap();
        assert_eq!(store.value(id), &before);
    }
}
