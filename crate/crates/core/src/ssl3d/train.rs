//! The semi-supervised re-training loop.

use std::fmt::Write as _;
use std::sync::Arc;

use cfr_nn::{Graph, Sgd, SgdConfig, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{lambda_at, loss_pl};
use super::model::{build_seg3d, input_node, Seg3D, Seg3DConfig};
use super::plugin::{Method, NoiseSource, PluginRegistry, TeacherPolicy, UnsupBatch};
use crate::error::{invalid, CfrError, Result};
use crate::metrics::evaluate;
use crate::seg2d::dice_ce_loss_var;
use crate::volume_io::{LabelVolume, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SSLConfig {
    pub method: Method,
    /// Adds pseudo-label guidance on unlabeled samples.
    pub use_pseudo_labels: bool,
    pub lambda_max: f64,
    /// Ramp length in epochs.
    pub ramp_len: f64,
    pub ema_decay: f64,
    pub epochs: usize,
    /// Optimizer steps per epoch; defaults to `max(m, n)`.
    pub iters_per_epoch: Option<usize>,
    pub labeled_per_step: usize,
    pub unlabeled_per_step: usize,
    /// Std of the additive Gaussian input perturbation (student and teacher draw independently).
    pub noise_sigma: f64,
    /// Snapshot-teacher refresh period in epochs.
    pub refresh_every: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Validation Dice every this many epochs (0 disables; the last epoch is always scored when enabled).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for SSLConfig {
    fn default() -> Self {
        Self {
            method: Method::MeanTeacher,
            use_pseudo_labels: true,
            lambda_max: 0.1,
            ramp_len: 40.0,
            ema_decay: 0.99,
            epochs: 60,
            iters_per_epoch: None,
            labeled_per_step: 1,
            unlabeled_per_step: 1,
            noise_sigma: 0.1,
            refresh_every: 20,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl SSLConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CfrError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return bad("lambda_max must be finite and non-negative");
        }
        if !(self.ramp_len >= 0.0 && self.noise_sigma >= 0.0 && self.lr > 0.0) {
            return bad("ramp_len and noise_sigma must be non-negative, lr positive");
        }
        if self.labeled_per_step == 0 || self.refresh_every == 0 || self.iters_per_epoch == Some(0) {
            return bad("labeled_per_step, refresh_every and iters_per_epoch must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UnlabeledCase {
    pub image: Volume3D,
    pub pseudo: Option<LabelVolume>,
}

#[derive(Clone, Debug, Default)]
pub struct SslData {
    pub labeled: Vec<(Volume3D, LabelVolume)>,
    pub unlabeled: Vec<UnlabeledCase>,
    /// Scored for the trace only; never trained on.
    pub val: Vec<(Volume3D, LabelVolume)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lambda: f64,
    pub l_sup: f64,
    pub l_uns: f64,
    pub l_pl: f64,
    /// The optimized objective `L_sup + λ·(L_uns + L_pl)` as evaluated on the graph.
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_sup: f64,
    pub l_uns: f64,
    pub l_pl: f64,
    /// λ at the epoch's last step.
    pub lambda: f64,
    pub total: f64,
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SslTrace {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl SslTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,l_sup,l_uns_rt,l_pl,lambda,val_dice\n");
        for e in &self.epochs {
            let vd = e.val_dice.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{}", e.epoch, e.l_sup, e.l_uns, e.l_pl, e.lambda, vd);
        }
        s
    }
}

/// Independent random streams so that adding or removing unsupervised work
/// never shifts the labeled sampling or the student's labeled perturbations.
struct Streams {
    labeled: ChaCha8Rng,
    unlabeled: ChaCha8Rng,
    labeled_noise: NoiseSource,
    unlabeled_noise: NoiseSource,
}

impl Streams {
    fn new(seed: u64, sigma: f64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            labeled: stream(1),
            unlabeled: stream(2),
            labeled_noise: NoiseSource { rng: stream(3), sigma },
            unlabeled_noise: NoiseSource { rng: stream(4), sigma },
        }
    }
}

pub fn mean_dice(model: &Seg3D, cases: &[(Volume3D, LabelVolume)]) -> Result<f64> {
    if cases.is_empty() {
        return Err(invalid("no cases to score"));
    }
    let mut total = 0.0;
    for (img, lab) in cases {
        total += evaluate(&model.predict(img)?, lab)?.dice;
    }
    Ok(total / cases.len() as f64)
}

fn check_data(cfg: &SSLConfig, model: &Seg3D, data: &SslData) -> Result<()> {
    if data.labeled.is_empty() {
        return Err(invalid("re-training needs at least one labeled volume"));
    }
    let k = model.config.num_classes;
    for (img, lab) in data.labeled.iter().chain(&data.val) {
        lab.assert_pairs_with(img)?;
        model.check_dims(img.dims())?;
        if lab.num_classes() != k {
            return Err(invalid(format!("label K={} but model K={k}", lab.num_classes())));
        }
    }
    for (i, u) in data.unlabeled.iter().enumerate() {
        model.check_dims(u.image.dims())?;
        match &u.pseudo {
            Some(p) => {
                p.assert_pairs_with(&u.image)?;
                if p.num_classes() != k {
                    return Err(invalid(format!("pseudo-label K={} but model K={k}", p.num_classes())));
                }
            }
            None if cfg.use_pseudo_labels => {
                return Err(CfrError::Missing(format!("pseudo-label for unlabeled volume {i}")));
            }
            None => {}
        }
    }
    Ok(())
}

/// Trains a fresh student (and its teacher) and returns the student with the loss trace.
pub fn train_ssl(
    seg3d: &Seg3DConfig,
    cfg: &SSLConfig,
    data: &SslData,
    registry: &PluginRegistry,
) -> Result<(Seg3D, SslTrace)> {
    cfg.validate()?;
    let mut student = build_seg3d(seg3d)?;
    check_data(cfg, &student, data)?;
    let method = cfg.method.resolve(registry)?;
    let policy = method.as_ref().map(|m| m.teacher_policy());
    let mut teacher = student.clone();
    let mut teacher_ready = policy == Some(TeacherPolicy::Ema);

    let (m, n) = (data.labeled.len(), data.unlabeled.len());
    let iters = cfg.iters_per_epoch.unwrap_or(m.max(n));
    let use_unlabeled = n > 0 && cfg.unlabeled_per_step > 0 && (method.is_some() || cfg.use_pseudo_labels);
    let labeled_inputs: Vec<Tensor> = data.labeled.iter().map(|(v, _)| v.to_tensor()).collect();
    let labeled_targets: Vec<Arc<Vec<u8>>> = data.labeled.iter().map(|(_, l)| Arc::new(l.data().to_vec())).collect();
    let unlabeled_inputs: Vec<Tensor> = data.unlabeled.iter().map(|u| u.image.to_tensor()).collect();

    let mut opt = Sgd::new(SgdConfig { lr: cfg.lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay });
    let mut rs = Streams::new(cfg.seed, cfg.noise_sigma);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = SslTrace::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rs.unlabeled);
        let mut sums = [0.0; 4];
        let mut lambda = 0.0;
        for it in 0..iters {
            let step = epoch * iters + it;
            lambda = lambda_at(step as f64 / iters as f64, cfg.lambda_max, cfg.ramp_len);

            let lab: Vec<usize> = (0..cfg.labeled_per_step).map(|_| rs.labeled.random_range(0..m)).collect();
            let unl: Vec<usize> = if use_unlabeled {
                (0..cfg.unlabeled_per_step).map(|j| order[(it * cfg.unlabeled_per_step + j) % n]).collect()
            } else {
                Vec::new()
            };
            let lab_noise: Vec<Option<Tensor>> =
                lab.iter().map(|&i| rs.labeled_noise.draw(labeled_inputs[i].shape())).collect();
            let unl_noise: Vec<Option<Tensor>> =
                unl.iter().map(|&i| rs.unlabeled_noise.draw(unlabeled_inputs[i].shape())).collect();

            let mut g = Graph::new();
            let mut lab_logits = Vec::with_capacity(lab.len());
            let mut sup_terms = Vec::with_capacity(lab.len());
            for (&i, noise) in lab.iter().zip(&lab_noise) {
                let x = input_node(&mut g, &labeled_inputs[i], noise.as_ref());
                let z = student.forward_graph(&mut g, x)?;
                sup_terms.push(dice_ce_loss_var(&mut g, z, labeled_targets[i].clone())?);
                lab_logits.push(z);
            }
            let l_sup = mean_var(&mut g, &sup_terms)?;

            // With λ = 0 the unsupervised terms are evaluated for the trace only,
            // on a separate graph, so they cannot perturb the student's update.
            let mut side = Graph::no_grad();
            let detached = lambda == 0.0;
            let ug: &mut Graph = if detached { &mut side } else { &mut g };
            let student_lab = if detached {
                let mut v = Vec::with_capacity(lab.len());
                for (&i, noise) in lab.iter().zip(&lab_noise) {
                    let x = input_node(ug, &labeled_inputs[i], noise.as_ref());
                    v.push(student.forward_graph(ug, x)?);
                }
                v
            } else {
                lab_logits
            };
            let mut unl_logits = Vec::with_capacity(unl.len());
            for (&i, noise) in unl.iter().zip(&unl_noise) {
                let x = input_node(ug, &unlabeled_inputs[i], noise.as_ref());
                unl_logits.push(student.forward_graph(ug, x)?);
            }

            let mut pl_terms = Vec::new();
            if cfg.use_pseudo_labels {
                for (&i, &z) in unl.iter().zip(&unl_logits) {
                    let pseudo = data.unlabeled[i].pseudo.as_ref().expect("checked above");
                    pl_terms.push(loss_pl(ug, z, pseudo)?);
                }
            }
            let l_pl = mean_var(ug, &pl_terms)?;

            let l_uns = match &method {
                None => ug.constant(Tensor::scalar(0.0)),
                Some(plugin) => {
                    let mut inputs: Vec<&Tensor> = lab.iter().map(|&i| &labeled_inputs[i]).collect();
                    inputs.extend(unl.iter().map(|&i| &unlabeled_inputs[i]));
                    let mut batch = UnsupBatch {
                        graph: &mut *ug,
                        student: &student,
                        teacher: &teacher,
                        inputs,
                        student_logits: student_lab.iter().chain(&unl_logits).copied().collect(),
                        num_labeled: lab.len(),
                        teacher_ready,
                        noise: &mut rs.unlabeled_noise,
                    };
                    plugin.loss(&mut batch)?
                }
            };
            let (v_uns, v_pl) = (ug.value(l_uns).item(), ug.value(l_pl).item());
            let v_sup = g.value(l_sup).item();

            let total = if detached {
                l_sup
            } else {
                let unsup = g.add(l_uns, l_pl)?;
                let weighted = g.scale(unsup, lambda);
                g.add(l_sup, weighted)?
            };
            let v_total = g.value(total).item();
            if !(v_total.is_finite() && v_uns.is_finite() && v_pl.is_finite()) {
                return Err(CfrError::Diverged(format!(
                    "epoch {epoch} step {it}: L_sup={v_sup} L_uns={v_uns} L_pl={v_pl} lambda={lambda} total={v_total}"
                )));
            }
            let grads = g.backward(total)?;
            opt.step(&mut student.params, &g.param_grads(&grads))?;
            if policy == Some(TeacherPolicy::Ema) {
                super::losses::ema_update(&mut teacher, &student, cfg.ema_decay)?;
            }

            trace.steps.push(StepRecord { epoch, step, lambda, l_sup: v_sup, l_uns: v_uns, l_pl: v_pl, total: v_total });
            for (s, v) in sums.iter_mut().zip([v_sup, v_uns, v_pl, v_total]) {
                *s += v;
            }
        }
        if policy == Some(TeacherPolicy::Snapshot) && (epoch + 1) % cfg.refresh_every == 0 {
            teacher = student.clone();
            teacher_ready = true;
        }
        let last = epoch + 1 == cfg.epochs;
        let val_dice = if cfg.eval_every > 0 && !data.val.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last) {
            Some(mean_dice(&student, &data.val)?)
        } else {
            None
        };
        let k = iters.max(1) as f64;
        trace.epochs.push(EpochRecord {
            epoch,
            l_sup: sums[0] / k,
            l_uns: sums[1] / k,
            l_pl: sums[2] / k,
            lambda,
            total: sums[3] / k,
            val_dice,
        });
    }
    Ok((student, trace))
}

fn mean_var(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else { return Ok(g.constant(Tensor::scalar(0.0))) };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(if terms.len() == 1 { acc } else { g.scale(acc, 1.0 / terms.len() as f64) })
}
