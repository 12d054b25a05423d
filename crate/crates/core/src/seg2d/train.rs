//! Adapter + decoder fine-tuning on labeled grids.

use std::sync::Arc;

use cfr_nn::{Adam, AdamConfig, Graph, Optimizer, Sgd, SgdConfig, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dice_ce_loss_var, Seg2D};
use crate::error::{invalid, CfrError, Result};
use crate::grid_concat::{resize_grid, GridImage};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// SGD only.
    pub momentum: f64,
    pub weight_decay: f64,
    /// Seeds the per-epoch sample order.
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 100, optimizer: OptimizerKind::Adam, lr: 0.005, momentum: 0.9, weight_decay: 0.0, seed: 0 }
    }
}

impl FinetuneConfig {
    pub fn optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Sgd => {
                Optimizer::Sgd(Sgd::new(SgdConfig { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay }))
            }
            OptimizerKind::Adam => {
                Optimizer::Adam(Adam::new(AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneTrace {
    /// Mean `L_ft` over each epoch's steps, measured before each update.
    pub epoch_loss: Vec<f64>,
}

/// Resizes an (image, label) grid pair to the model input and flattens it.
pub fn prepare_pair(model: &Seg2D, image: &GridImage, label: &GridImage) -> Result<(Tensor, Arc<Vec<u8>>)> {
    let s = model.config.input_size;
    let img = resize_grid(image, s)?;
    let lab = resize_grid(label, s)?;
    let pixels = img.image_data().ok_or_else(|| invalid("first grid of a pair must be an image"))?;
    let labels = lab.label_data().ok_or_else(|| invalid("second grid of a pair must be a label grid"))?;
    if lab.num_classes() != Some(model.config.num_classes) {
        return Err(invalid(format!("label grid has {:?} classes, model {}", lab.num_classes(), model.config.num_classes)));
    }
    let x = Tensor::new(&[s, s], pixels.iter().map(|&v| f64::from(v)).collect())?;
    Ok((x, Arc::new(labels.to_vec())))
}

/// Trains only the adapters and decoder; frozen encoder weights are never touched.
pub fn finetune(model: &mut Seg2D, pairs: &[(GridImage, GridImage)], cfg: &FinetuneConfig) -> Result<FinetuneTrace> {
    if pairs.is_empty() {
        return Err(invalid("fine-tuning needs at least one labeled grid"));
    }
    let data = pairs.iter().map(|(i, l)| prepare_pair(model, i, l)).collect::<Result<Vec<_>>>()?;
    let mut opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = FinetuneTrace::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (x, t) = &data[i];
            let mut g = Graph::new();
            let logits = model.forward_graph(&mut g, x)?;
            let loss = dice_ce_loss_var(&mut g, logits, t.clone())?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(CfrError::Diverged(format!("fine-tune loss {value} at epoch {epoch}")));
            }
            total += value;
            let grads = g.backward(loss)?;
            opt.step(&mut model.params, &g.param_grads(&grads))?;
        }
        trace.epoch_loss.push(total / data.len() as f64);
    }
    Ok(trace)
}
