//! SGD / Adam / AdamW steps over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::{Error, Result};

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adam,
    AdamW,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimKind::Sgd, learning_rate: lr, weight_decay: 0.0, clip_norm: None, betas: default_betas() }
    }

    pub fn adam(lr: f64) -> Self {
        Self { kind: OptimKind::Adam, learning_rate: lr, weight_decay: 0.0, clip_norm: None, betas: default_betas() }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self { kind: OptimKind::AdamW, learning_rate: lr, weight_decay, clip_norm: None, betas: default_betas() }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be non-negative"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::invalid("betas must lie in (0, 1)"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip_norm must be positive"));
            }
        }
        Ok(())
    }
}

/// Apply one optimizer step using the gradients currently in the store.
/// Gradients are clipped in place when `clip_norm` is set but are otherwise
/// left for the caller to zero. Fails before touching any value if a
/// gradient is non-finite.
pub fn optim_step(store: &mut ParamStore, cfg: &OptimConfig) -> Result<()> {
    cfg.validate()?;
    for name in store.names() {
        if !store.grad(name).is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    if let Some(clip) = cfg.clip_norm {
        let norm = store.grad_norm();
        if norm > clip {
            let s = clip / norm;
            for (_, e) in store.entries_mut() {
                e.grad.data.iter_mut().for_each(|g| *g *= s);
            }
        }
    }

    let t = (store.step_count + 1) as f64;
    let (b1, b2) = cfg.betas;
    let bias1 = 1.0 - b1.powf(t);
    let bias2 = 1.0 - b2.powf(t);
    let lr = cfg.learning_rate;
    let wd = cfg.weight_decay;

    for (_, e) in store.entries_mut() {
        match cfg.kind {
            OptimKind::Sgd => {
                for i in 0..e.value.len() {
                    let g = e.grad.data[i] + wd * e.value.data[i];
                    e.value.data[i] -= lr * g;
                }
            }
            OptimKind::Adam | OptimKind::AdamW => {
                let decoupled = cfg.kind == OptimKind::AdamW;
                if e.m.is_none() {
                    e.m = Some(vec![0.0; e.value.len()]);
                    e.v = Some(vec![0.0; e.value.len()]);
                }
                let m = e.m.as_mut().unwrap();
                let v = e.v.as_mut().unwrap();
                for i in 0..e.value.len() {
                    let g = if decoupled {
                        e.grad.data[i]
                    } else {
                        e.grad.data[i] + wd * e.value.data[i]
                    };
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let mhat = m[i] / bias1;
                    let vhat = v[i] / bias2;
                    let mut update = mhat / (vhat.sqrt() + ADAM_EPS);
                    if decoupled {
                        update += wd * e.value.data[i];
                    }
                    e.value.data[i] -= lr * update;
                }
            }
        }
    }
    store.step_count += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NumArray;

    fn store_with(value: Vec<f64>, grad: Vec<f64>) -> ParamStore {
        let mut ps = ParamStore::new();
        let n = value.len();
        ps.insert("w", NumArray::vector(value));
        ps.grad_mut("w").data.copy_from_slice(&grad[..n]);
        ps
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut ps = store_with(vec![1.0, 2.0], vec![0.5, -0.5]);
        optim_step(&mut ps, &OptimConfig::sgd(0.0)).unwrap();
        assert_eq!(ps.value("w").data, vec![1.0, 2.0]);
        assert_eq!(ps.step_count, 1);
    }

    #[test]
    fn sgd_unit_lr_subtracts_gradient() {
        let mut ps = store_with(vec![1.0, 2.0], vec![0.5, -0.5]);
        optim_step(&mut ps, &OptimConfig::sgd(1.0)).unwrap();
        assert_eq!(ps.value("w").data, vec![0.5, 2.5]);
    }

    #[test]
    fn nan_gradient_fails_before_mutating() {
        let mut ps = store_with(vec![1.0, 2.0], vec![f64::NAN, 0.0]);
        let err = optim_step(&mut ps, &OptimConfig::sgd(1.0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(ps.value("w").data, vec![1.0, 2.0]);
        assert_eq!(ps.step_count, 0);
    }

    #[test]
    fn clip_norm_bounds_gradient_norm() {
        let mut ps = store_with(vec![0.0, 0.0, 0.0], vec![3.0, 4.0, 0.0]);
        optim_step(&mut ps, &OptimConfig::sgd(0.0).with_clip(1.0)).unwrap();
        assert!(ps.grad_norm() <= 1.0 + 1e-9);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        // loss = 0.5*||w - target||^2, grad = w - target
        let target = [1.5, -2.0, 0.3, 4.0];
        let mut ps = store_with(vec![0.0; 4], vec![0.0; 4]);
        let cfg = OptimConfig::adam(0.05);
        let mut loss = f64::MAX;
        for _ in 0..500 {
            let mut g = vec![0.0; 4];
            loss = 0.0;
            for i in 0..4 {
                let d = ps.value("w").data[i] - target[i];
                g[i] = d;
                loss += 0.5 * d * d;
            }
            ps.grad_mut("w").data.copy_from_slice(&g);
            optim_step(&mut ps, &cfg).unwrap();
        }
        assert!(loss < 1e-6, "final loss {loss}");
    }

    #[test]
    fn invalid_config_rejected() {
        let mut bad = OptimConfig::sgd(0.1);
        bad.betas = (1.5, 0.9);
        assert!(bad.validate().is_err());
    }
}
