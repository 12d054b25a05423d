//! Stage stamps: each stage records a key derived from the config blocks it
//! depends on (and its upstream keys) plus the SHA-256 of every file it wrote.
//! Downstream stages refuse artifacts whose key or content does not match.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Gen,
    Finetune,
    Pseudolabel,
    Retrain,
    Eval,
    Eval2d,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Finetune => "finetune",
            Stage::Pseudolabel => "pseudolabel",
            Stage::Retrain => "retrain",
            Stage::Eval => "eval",
            Stage::Eval2d => "eval-2d",
        }
    }

    /// The command that produces this stage's artifacts.
    fn command(self) -> &'static str {
        match self {
            Stage::Gen => "cfr gen",
            Stage::Finetune => "cfr finetune",
            Stage::Pseudolabel => "cfr pseudolabel",
            Stage::Retrain => "cfr retrain",
            Stage::Eval => "cfr eval",
            Stage::Eval2d => "cfr eval --model seg2d",
        }
    }
}

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("config blocks serialize")
}

/// Keys for every stage of one config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageKeys {
    pub gen: String,
    pub finetune: String,
    pub pseudolabel: String,
    pub retrain: String,
    pub eval: String,
    pub eval2d: String,
}

impl StageKeys {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let gen = digest(&[b"gen", &json(&cfg.dataset)]);
        let finetune = digest(&[
            b"finetune",
            gen.as_bytes(),
            &json(&cfg.seg2d),
            &json(&cfg.lora),
            &json(&cfg.concat),
            &json(&cfg.finetune),
        ]);
        let pseudolabel = digest(&[b"pseudolabel", finetune.as_bytes()]);
        // Baselines without pseudo-label guidance do not depend on the 2D stages.
        let pl: &[u8] = if cfg.ssl.use_pseudo_labels { pseudolabel.as_bytes() } else { b"" };
        let retrain = digest(&[b"retrain", gen.as_bytes(), pl, &json(&cfg.seg3d), &json(&cfg.ssl)]);
        let eval = digest(&[b"eval", retrain.as_bytes()]);
        let eval2d = digest(&[b"eval-2d", finetune.as_bytes()]);
        Self { gen, finetune, pseudolabel, retrain, eval, eval2d }
    }

    pub fn get(&self, stage: Stage) -> &str {
        match stage {
            Stage::Gen => &self.gen,
            Stage::Finetune => &self.finetune,
            Stage::Pseudolabel => &self.pseudolabel,
            Stage::Retrain => &self.retrain,
            Stage::Eval => &self.eval,
            Stage::Eval2d => &self.eval2d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub key: String,
    /// Run-relative path → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

fn stamp_path(run: &Path, stage: Stage) -> std::path::PathBuf {
    run.join("stamps").join(format!("{}.json", stage.name()))
}

pub fn write_stamp(run: &Path, stage: Stage, key: &str, outputs: &[String]) -> Result<()> {
    let mut hashes = BTreeMap::new();
    for rel in outputs {
        hashes.insert(rel.clone(), file_sha256(&run.join(rel))?);
    }
    let stamp = Stamp { stage: stage.name().into(), key: key.into(), outputs: hashes };
    std::fs::create_dir_all(run.join("stamps"))?;
    std::fs::write(stamp_path(run, stage), serde_json::to_vec_pretty(&stamp)?)?;
    Ok(())
}

/// Fails with a stage-order error unless `stage` ran with `key` and its files are intact.
pub fn require(run: &Path, stage: Stage, key: &str) -> Result<Stamp> {
    let path = stamp_path(run, stage);
    let order = |msg: String| CliError::StageOrder(msg);
    let bytes = std::fs::read(&path)
        .map_err(|_| order(format!("no `{}` artifacts in {}; run `{}` first", stage.name(), run.display(), stage.command())))?;
    let stamp: Stamp = serde_json::from_slice(&bytes)?;
    if stamp.key != key {
        return Err(order(format!(
            "`{}` artifacts in {} were produced with a different configuration (stamp {}, expected {}); rerun `{}`",
            stage.name(),
            run.display(),
            &stamp.key[..12],
            &key[..12],
            stage.command()
        )));
    }
    for (rel, hash) in &stamp.outputs {
        let ok = file_sha256(&run.join(rel)).map(|h| &h == hash).unwrap_or(false);
        if !ok {
            return Err(order(format!("artifact {rel} changed or vanished since `{}` ran; rerun it", stage.name())));
        }
    }
    Ok(stamp)
}
