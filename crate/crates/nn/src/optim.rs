//! First-order optimizers: SGD with heavy-ball momentum and Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, weight_decay: 0.0 }
    }
}

/// `v ← μ·v + (g + wd·w)`, `w ← w − lr·v` (PyTorch convention).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: BTreeMap::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Frozen parameters are never written, even if a gradient is supplied.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let SgdConfig { lr, momentum, weight_decay } = self.config;
        for (name, param) in store.iter_mut() {
            if !param.trainable {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let mut d = g.clone();
            if weight_decay != 0.0 {
                d.axpy(weight_decay, &param.value)?;
            }
            if momentum != 0.0 {
                let v = self.velocity.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
                for (vv, &dd) in v.data_mut().iter_mut().zip(d.data()) {
                    *vv = momentum * *vv + dd;
                }
                d = v.clone();
            }
            param.value.axpy(-lr, &d)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay: `w ← w − lr·wd·w`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Bias-corrected Adam; moments are kept per parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    steps: BTreeMap<String, i32>,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, steps: BTreeMap::new(), moments: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        for (name, param) in store.iter_mut() {
            if !param.trainable {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != param.value.shape() {
                return Err(crate::NnError::Shape(format!("gradient for {name} has shape {:?}", g.shape())));
            }
            let t = self.steps.entry(name.to_string()).or_insert(0);
            *t += 1;
            let (c1, c2) = (1.0 - beta1.powi(*t), 1.0 - beta2.powi(*t));
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let w = param.value.data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (weight_decay * *w + (*m / c1) / ((*v / c2).sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// Either optimizer behind one `step`.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(store, grads),
            Optimizer::Adam(o) => o.step(store, grads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates_and_frozen_params_stay_put() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0), true).unwrap();
        store.insert("frozen", Tensor::scalar(1.0), false).unwrap();
        let mut opt = Sgd::new(SgdConfig { lr: 0.1, momentum: 0.5, weight_decay: 0.0 });
        let grads: BTreeMap<_, _> =
            [("w".to_string(), Tensor::scalar(1.0)), ("frozen".to_string(), Tensor::scalar(1.0))].into();
        opt.step(&mut store, &grads).unwrap();
        assert!((store.value("w").unwrap().item() - 0.9).abs() < 1e-15);
        opt.step(&mut store, &grads).unwrap();
        // v = 0.5·1 + 1 = 1.5
        assert!((store.value("w").unwrap().item() - 0.75).abs() < 1e-15);
        assert_eq!(store.value("frozen").unwrap().item(), 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr_and_skips_frozen() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![1.0, 1.0]).unwrap(), true).unwrap();
        store.insert("frozen", Tensor::scalar(1.0), false).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        let grads: BTreeMap<_, _> = [
            ("w".to_string(), Tensor::new(&[2], vec![3.0, -0.5]).unwrap()),
            ("frozen".to_string(), Tensor::scalar(1.0)),
        ]
        .into();
        opt.step(&mut store, &grads).unwrap();
        // Bias correction makes the first update ±lr regardless of gradient scale.
        let w = store.value("w").unwrap().data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-8 && (w[1] - 1.1).abs() < 1e-8, "{w:?}");
        assert_eq!(store.value("frozen").unwrap().item(), 1.0);
    }
}
