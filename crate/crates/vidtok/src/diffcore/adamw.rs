use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// AdamW hyperparameters. Defaults follow the training recipe:
/// constant lr 1e-4, (0.9, 0.999) betas, weight decay 0.001.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.001 }
    }
}

/// Decoupled-weight-decay Adam over a named parameter set.
/// First/second moments are kept per parameter; `step` counts updates.
#[derive(Debug)]
pub struct AdamW<F: Scalar> {
    pub cfg: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<String, (Vec<F>, Vec<F>)>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn moments(&self) -> &BTreeMap<String, (Vec<F>, Vec<F>)> {
        &self.moments
    }

    pub fn restore_moments(&mut self, name: &str, m: Vec<F>, v: Vec<F>) {
        self.moments.insert(name.to_string(), (m, v));
    }

    /// One update over all (name, param, grad) triples.
    /// Weight decay is applied directly to the parameter, decoupled from the
    /// moment estimates; moments are bias-corrected by the incremented step.
    pub fn step<'a>(
        &mut self,
        updates: impl Iterator<Item = (&'a str, &'a mut Tensor<F>, &'a [F])>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr = F::from_f64(self.cfg.lr);
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let eps = F::from_f64(self.cfg.eps);
        let wd = F::from_f64(self.cfg.weight_decay);
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);
        for (name, param, grad) in updates {
            if param.numel() != grad.len() {
                return Err(Error::Shape(format!(
                    "adamw: parameter '{}' has {} elements, gradient has {}",
                    name,
                    param.numel(),
                    grad.len()
                )));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter '{}'", name)));
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![F::zero(); grad.len()], vec![F::zero(); grad.len()]));
            let p = param.data_mut();
            for i in 0..grad.len() {
                p[i] -= lr * wd * p[i];
                m[i] = b1 * m[i] + (F::one() - b1) * grad[i];
                v[i] = b2 * v[i] + (F::one() - b2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
