use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

/// Adam hyperparameters. Weight decay is coupled: `weight_decay * w` is
/// added to the gradient before the moment updates (L2 penalty), not
/// applied to the weights directly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config(
                "weight_decay must be non-negative and eps positive".into(),
            ));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over every parameter in the store.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    let first = store.iter().next().map(|p| p.step_count);
    let consistent = store.iter().all(|p| Some(p.step_count) == first);
    if !consistent {
        return Err(Error::State(
            "parameters disagree on optimizer step count".into(),
        ));
    }
    let f = T::from_f64_lossy;
    let (lr, b1, b2, wd, eps) = (
        f(cfg.lr),
        f(cfg.beta1),
        f(cfg.beta2),
        f(cfg.weight_decay),
        f(cfg.eps),
    );
    for p in store.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let w = p.value.data_mut();
        let g = p.grad.data();
        let m = p.adam_m.data_mut();
        let v = p.adam_v.data_mut();
        for i in 0..w.len() {
            let gi = g[i] + wd * w[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
