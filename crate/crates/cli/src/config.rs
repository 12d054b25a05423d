//! The experiment config: one JSON file, scalar fields overridable with `--set a.b=v`.

use std::path::{Path, PathBuf};

use cfr_core::seg2d::{FinetuneConfig, Seg2DConfig};
use cfr_core::ssl3d::{Method, SSLConfig, Seg3DConfig};
use cfr_core::volume_io::Dims;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub dims: Dims,
    pub num_classes: usize,
    /// Training volumes (labeled + unlabeled).
    pub train_pool: usize,
    /// `m`: how many training volumes keep their labels.
    pub num_labeled: usize,
    pub test_pool: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { dims: [32, 32, 36], num_classes: 2, train_pool: 16, num_labeled: 1, test_pool: 4, noise_sigma: 0.05, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    #[default]
    None,
    ShuffleSlices,
    RotflipSlices,
}

/// How labeled volumes are perturbed before tiling for fine-tuning.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConcatConfig {
    pub perturbation: PerturbationKind,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used in reports; derived from the re-training method when absent.
    pub name: Option<String>,
    pub dataset: DatasetConfig,
    pub seg2d: Seg2DConfig,
    pub lora: LoraConfig,
    pub concat: ConcatConfig,
    pub finetune: FinetuneConfig,
    pub seg3d: Seg3DConfig,
    pub ssl: SSLConfig,
    pub output_dir: Option<PathBuf>,
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies `KEY=VALUE` overrides and validates.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let base: Self = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        let mut value = serde_json::to_value(&base)?;
        for s in sets {
            apply_set(&mut value, s)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let k = d.num_classes;
        if self.seg2d.num_classes != k || self.seg3d.num_classes != k {
            return Err(config_err(format!(
                "num_classes disagree: dataset {k}, seg2d {}, seg3d {}",
                self.seg2d.num_classes, self.seg3d.num_classes
            )));
        }
        if self.seg2d.lora_rank != self.lora.rank {
            return Err(config_err(format!("lora.rank {} but seg2d.lora_rank {}", self.lora.rank, self.seg2d.lora_rank)));
        }
        if d.dims[0] != d.dims[1] {
            return Err(config_err(format!("slices must be square, got dims {:?}", d.dims)));
        }
        let f = self.seg3d.divisor();
        if d.dims.iter().any(|&x| x == 0 || x % f != 0) {
            return Err(config_err(format!("dims {:?} must be positive multiples of {f} for seg3d", d.dims)));
        }
        if d.num_labeled == 0 || d.num_labeled > d.train_pool {
            return Err(config_err(format!("num_labeled must be in 1..={}", d.train_pool)));
        }
        if d.test_pool == 0 {
            return Err(config_err("test_pool must be at least 1"));
        }
        if !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
            return Err(config_err("dataset.noise_sigma must be finite and non-negative"));
        }
        if let Method::Plugin(name) = &self.ssl.method {
            return Err(config_err(format!("plugin method {name:?} is not registered in the command-line driver")));
        }
        self.seg2d.validate()?;
        self.seg3d.validate()?;
        self.ssl.validate()?;
        Ok(())
    }

    pub fn run_dir(&self, out: Option<&Path>) -> PathBuf {
        out.map(Path::to_path_buf).or_else(|| self.output_dir.clone()).unwrap_or_else(|| PathBuf::from("run"))
    }

    /// Report label, e.g. `CFR_MT` for Mean Teacher with pseudo-label guidance.
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let pl = self.ssl.use_pseudo_labels;
        match (&self.ssl.method, pl) {
            (Method::Supervised, false) => "Labeled-only".into(),
            (Method::Supervised, true) => "Supervised+PL".into(),
            (Method::MeanTeacher, true) => "CFR_MT".into(),
            (Method::MeanTeacher, false) => "MT".into(),
            (Method::SelfTraining, true) => "CFR_ST".into(),
            (Method::SelfTraining, false) => "Self-training".into(),
            (Method::Plugin(n), true) => format!("CFR_{n}"),
            (Method::Plugin(n), false) => n.clone(),
        }
    }
}

/// `a.b.c=v`: the key must already exist; `v` is parsed as JSON, else taken as a string.
fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| config_err(format!("{key}: {} is not a block", parts[..i].join("."))))?;
        node = obj.get_mut(*part).ok_or_else(|| config_err(format!("unknown config key {key:?}")))?;
    }
    if node.is_object() {
        return Err(config_err(format!("{key} is a block; set its fields individually")));
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let sets = ["ssl.lambda_max=0".to_string(), "ssl.method=supervised".into(), "dataset.dims=[16,16,8]".into()];
        let c = ExperimentConfig::load(None, &sets).unwrap();
        assert_eq!(c.ssl.lambda_max, 0.0);
        assert_eq!(c.ssl.method, Method::Supervised);
        assert_eq!(c.dataset.dims, [16, 16, 8]);
        for bad in ["ssl.lamda_max=0", "ssl=3", "ssl.lambda_max", "ssl.method=magic"] {
            let e = ExperimentConfig::load(None, &[bad.to_string()]).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }

    #[test]
    fn cross_block_consistency_is_checked() {
        for bad in ["seg3d.num_classes=3", "lora.rank=8", "dataset.dims=[32,16,36]", "dataset.num_labeled=0"] {
            assert!(ExperimentConfig::load(None, &[bad.to_string()]).is_err(), "{bad}");
        }
        let both = ["lora.rank=8".to_string(), "seg2d.lora_rank=8".into()];
        assert!(ExperimentConfig::load(None, &both).is_ok());
    }

    #[test]
    fn labels_follow_method_and_pseudo_labels() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.label(), "CFR_MT");
        c.ssl.use_pseudo_labels = false;
        assert_eq!(c.label(), "MT");
        c.ssl.method = Method::Supervised;
        assert_eq!(c.label(), "Labeled-only");
    }
}
