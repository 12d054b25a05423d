//! Pluggable unsupervised objectives.
//!
//! A plugin sees the student graph, both networks, the clean inputs of the
//! current batch and the student logits already recorded on the perturbed
//! inputs. It returns a scalar node on that graph.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use cfr_nn::{Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::losses::{uns_meanteacher, uns_selftrain};
use super::model::Seg3D;
use crate::error::{invalid, CfrError, Result};

/// How the teacher follows the student when a method is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherPolicy {
    /// EMA after every optimizer step.
    Ema,
    /// Copy of the student taken every `refresh_every` epochs.
    Snapshot,
}

pub struct UnsupBatch<'a> {
    pub graph: &'a mut Graph,
    pub student: &'a Seg3D,
    pub teacher: &'a Seg3D,
    /// Clean `[1, H, W, D]` inputs, labeled samples first.
    pub inputs: Vec<&'a Tensor>,
    /// Student logits on the perturbed inputs, aligned with `inputs`.
    pub student_logits: Vec<Var>,
    pub num_labeled: usize,
    /// False until a snapshot teacher exists.
    pub teacher_ready: bool,
    pub(crate) noise: &'a mut NoiseSource,
}

impl UnsupBatch<'_> {
    /// A fresh teacher-side perturbation for an input of `shape`.
    pub fn teacher_noise(&mut self, shape: &[usize]) -> Option<Tensor> {
        self.noise.draw(shape)
    }

    pub fn zero(&mut self) -> Var {
        self.graph.constant(Tensor::scalar(0.0))
    }

    /// Mean of scalar nodes (zero for none).
    pub fn mean(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else { return Ok(self.zero()) };
        let mut acc = first;
        for &t in rest {
            acc = self.graph.add(acc, t)?;
        }
        Ok(self.graph.scale(acc, 1.0 / terms.len() as f64))
    }
}

pub(crate) struct NoiseSource {
    pub rng: ChaCha8Rng,
    pub sigma: f64,
}

impl NoiseSource {
    pub fn draw(&mut self, shape: &[usize]) -> Option<Tensor> {
        (self.sigma > 0.0).then(|| {
            let n = Normal::new(0.0, self.sigma).expect("finite sigma");
            let len = shape.iter().product();
            Tensor::new(shape, (0..len).map(|_| n.sample(&mut self.rng)).collect()).expect("noise shape")
        })
    }
}

pub trait UnsupervisedLoss: Send + Sync {
    /// Must return a finite scalar node on `batch.graph`.
    fn loss(&self, batch: &mut UnsupBatch<'_>) -> Result<Var>;

    fn teacher_policy(&self) -> TeacherPolicy {
        TeacherPolicy::Ema
    }
}

impl<F> UnsupervisedLoss for F
where
    F: Fn(&mut UnsupBatch<'_>) -> Result<Var> + Send + Sync,
{
    fn loss(&self, batch: &mut UnsupBatch<'_>) -> Result<Var> {
        self(batch)
    }
}

/// Consistency on every sample (labeled and unlabeled), averaged.
pub struct MeanTeacherLoss;

impl UnsupervisedLoss for MeanTeacherLoss {
    fn loss(&self, batch: &mut UnsupBatch<'_>) -> Result<Var> {
        let mut terms = Vec::with_capacity(batch.inputs.len());
        for i in 0..batch.inputs.len() {
            let input = batch.inputs[i];
            let noise = batch.teacher_noise(input.shape());
            terms.push(uns_meanteacher(batch.graph, batch.teacher, input, noise.as_ref(), batch.student_logits[i])?);
        }
        batch.mean(&terms)
    }
}

/// Hard targets from the frozen snapshot teacher on the unlabeled samples.
pub struct SelfTrainingLoss;

impl UnsupervisedLoss for SelfTrainingLoss {
    fn loss(&self, batch: &mut UnsupBatch<'_>) -> Result<Var> {
        if !batch.teacher_ready {
            return Ok(batch.zero());
        }
        let mut terms = Vec::new();
        for i in batch.num_labeled..batch.inputs.len() {
            terms.push(uns_selftrain(batch.graph, batch.teacher, batch.inputs[i], batch.student_logits[i])?);
        }
        batch.mean(&terms)
    }

    fn teacher_policy(&self) -> TeacherPolicy {
        TeacherPolicy::Snapshot
    }
}

#[derive(Clone, Default)]
pub struct PluginRegistry {
    plugins: BTreeMap<String, Arc<dyn UnsupervisedLoss>>,
}

impl fmt::Debug for PluginRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.plugins.keys()).finish()
    }
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, plugin: impl UnsupervisedLoss + 'static) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(invalid("plugin name must not be empty"));
        }
        if self.plugins.contains_key(&name) {
            return Err(invalid(format!("plugin {name:?} is already registered")));
        }
        self.plugins.insert(name, Arc::new(plugin));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn UnsupervisedLoss>> {
        self.plugins.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.plugins.keys().map(String::as_str)
    }
}

/// Free-function form of [`PluginRegistry::register`].
pub fn register_unsup_plugin(
    registry: &mut PluginRegistry,
    name: impl Into<String>,
    plugin: impl UnsupervisedLoss + 'static,
) -> Result<()> {
    registry.register(name, plugin)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// Labeled loss only (plus pseudo-label guidance when enabled).
    Supervised,
    SelfTraining,
    MeanTeacher,
    Plugin(String),
}

impl Method {
    pub(crate) fn resolve(&self, registry: &PluginRegistry) -> Result<Option<Arc<dyn UnsupervisedLoss>>> {
        Ok(match self {
            Method::Supervised => None,
            Method::SelfTraining => Some(Arc::new(SelfTrainingLoss)),
            Method::MeanTeacher => Some(Arc::new(MeanTeacherLoss)),
            Method::Plugin(name) => Some(registry.get(name).ok_or_else(|| {
                let known: Vec<&str> = registry.names().collect();
                CfrError::Config(format!("unknown unsupervised plugin {name:?} (registered: {known:?})"))
            })?),
        })
    }
}

impl FromStr for Method {
    type Err = CfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Self::Supervised),
            "self_training" => Ok(Self::SelfTraining),
            "mean_teacher" => Ok(Self::MeanTeacher),
            other => match other.strip_prefix("plugin:") {
                Some(name) if !name.is_empty() => Ok(Self::Plugin(name.to_string())),
                _ => Err(CfrError::Config(format!(
                    "unknown method {other:?}; expected supervised, self_training, mean_teacher or plugin:<name>"
                ))),
            },
        }
    }
}

impl TryFrom<String> for Method {
    type Error = CfrError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.to_string()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Supervised => f.write_str("supervised"),
            Method::SelfTraining => f.write_str("self_training"),
            Method::MeanTeacher => f.write_str("mean_teacher"),
            Method::Plugin(n) => write!(f, "plugin:{n}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_strings_round_trip() {
        for s in ["supervised", "self_training", "mean_teacher", "plugin:acmt"] {
            let m: Method = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
            assert_eq!(serde_json::to_value(&m).unwrap(), serde_json::json!(s));
        }
        assert!(matches!("magic".parse::<Method>(), Err(CfrError::Config(_))));
        assert!("plugin:".parse::<Method>().is_err());
        assert!(serde_json::from_value::<Method>(serde_json::json!("nope")).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut r = PluginRegistry::new();
        register_unsup_plugin(&mut r, "zero", |b: &mut UnsupBatch<'_>| Ok(b.zero())).unwrap();
        assert!(r.register("zero", MeanTeacherLoss).is_err());
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["zero"]);
    }

    #[test]
    fn unknown_plugin_is_a_config_error() {
        let r = PluginRegistry::new();
        assert!(matches!(Method::Plugin("x".into()).resolve(&r), Err(CfrError::Config(_))));
        assert!(Method::Supervised.resolve(&r).unwrap().is_none());
    }
}
