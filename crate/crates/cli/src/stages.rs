//! One function per pipeline stage. Each reads the previous stage's artifacts
//! from the run directory, refuses them if their stamp does not match the
//! current config, and writes its own artifacts plus a stamp.

use std::path::{Path, PathBuf};

use cfr_core::grid_concat::{concatenate, perturb, GridLayout, Perturbation};
use cfr_core::metrics::{evaluate, MetricsRecord};
use cfr_core::pseudo_label::pseudo_label;
use cfr_core::seg2d::{build_seg2d, finetune, FinetuneTrace, Seg2D};
use cfr_core::ssl3d::{train_ssl, PluginRegistry, Seg3D, SslData, SslTrace, UnlabeledCase};
use cfr_core::volume_io::{
    generate_phantom_with, write_volume, DatasetManifest, LabelVolume, ManifestEntry, PhantomConfig, Split,
    StoredVolume, Volume3D,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PerturbationKind};
use crate::error::Result;
use crate::stamp::{require, write_stamp, Stage, StageKeys};

pub const MANIFEST: &str = "data/manifest.json";
pub const SEG2D_CKPT: &str = "seg2d.ckpt";
pub const FINETUNE_TRACE: &str = "finetune_trace.csv";
pub const PSEUDO_INDEX: &str = "pseudo/index.json";
pub const PSEUDO_QUALITY: &str = "pseudo/quality.json";
pub const SEG3D_CKPT: &str = "seg3d.ckpt";
pub const TRACE_CSV: &str = "trace.csv";
pub const TRACE_JSON: &str = "trace.json";
pub const CONFIG_COPY: &str = "config.json";

/// Evaluation outputs for the model a stage produced.
pub fn metrics_paths(model: EvalModel) -> (&'static str, &'static str) {
    match model {
        EvalModel::Seg3d => ("eval/metrics.csv", "eval/metrics.json"),
        EvalModel::Seg2d => ("eval/metrics_seg2d.csv", "eval/metrics_seg2d.json"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalModel {
    Seg3d,
    Seg2d,
}

/// A stage's outcome, echoed to stdout by the binary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub run_dir: PathBuf,
    pub outputs: Vec<String>,
    pub note: String,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a Path,
    keys: StageKeys,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a ExperimentConfig, dir: &'a Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { cfg, dir, keys: StageKeys::new(cfg) })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn require(&self, stage: Stage) -> Result<()> {
        require(self.dir, stage, self.keys.get(stage)).map(|_| ())
    }

    fn finish(&self, stage: Stage, outputs: Vec<String>, note: String) -> Result<StageSummary> {
        // Written only on success, so a rejected stage never clobbers it.
        std::fs::write(self.dir.join(CONFIG_COPY), serde_json::to_vec_pretty(self.cfg)?)?;
        write_stamp(self.dir, stage, self.keys.get(stage), &outputs)?;
        Ok(StageSummary { stage: stage.name().into(), run_dir: self.dir.to_path_buf(), outputs, note })
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        Ok(DatasetManifest::load(self.path(MANIFEST))?)
    }

    fn data_dir(&self) -> PathBuf {
        self.path("data")
    }

    fn cases(&self, split: Split) -> Result<Vec<(ManifestEntry, Volume3D, Option<LabelVolume>)>> {
        let base = self.data_dir();
        self.manifest()?
            .with_split(split)
            .map(|e| {
                let img = e.load_image(&base)?;
                // Unlabeled training volumes are never read with their labels.
                let lab = if split == Split::UnlabeledTrain { None } else { Some(e.load_label(&base)?) };
                Ok((e.clone(), img, lab))
            })
            .collect()
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

/// Per-case phantom seed, decorrelated across dataset seeds.
fn case_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

pub fn cmd_gen(cfg: &ExperimentConfig, dir: &Path) -> Result<StageSummary> {
    let run = Run::new(cfg, dir)?;
    let d = &cfg.dataset;
    let pc = PhantomConfig { noise_sigma: d.noise_sigma, ..PhantomConfig::new(d.dims, d.num_classes) };
    std::fs::create_dir_all(run.data_dir())?;
    let mut entries = Vec::new();
    let mut outputs = Vec::new();
    for i in 0..d.train_pool + d.test_pool {
        let (img, lab) = generate_phantom_with(case_seed(d.seed, i), &pc)?;
        let (ip, lp) = (format!("img_{i:03}.cfrv"), format!("lab_{i:03}.cfrv"));
        write_volume(run.data_dir().join(&ip), &StoredVolume::Image(img))?;
        write_volume(run.data_dir().join(&lp), &StoredVolume::Labels(lab))?;
        outputs.push(format!("data/{ip}"));
        outputs.push(format!("data/{lp}"));
        let split = if i < d.train_pool { Split::UnlabeledTrain } else { Split::Test };
        entries.push(ManifestEntry { image: ip, label: Some(lp), split });
    }
    let pool = DatasetManifest { dims: d.dims, num_classes: d.num_classes, seed: d.seed, entries };
    let manifest = cfr_core::volume_io::split_dataset(&pool, d.num_labeled, d.seed)?;
    manifest.save(run.path(MANIFEST))?;
    outputs.push(MANIFEST.into());
    let note = format!(
        "{} labeled, {} unlabeled, {} test volumes of {:?}",
        manifest.count(Split::LabeledTrain),
        manifest.count(Split::UnlabeledTrain),
        manifest.count(Split::Test),
        d.dims
    );
    run.finish(Stage::Gen, outputs, note)
}

fn trace_csv(trace: &FinetuneTrace) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in trace.epoch_loss.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

pub fn cmd_finetune(cfg: &ExperimentConfig, dir: &Path) -> Result<StageSummary> {
    let run = Run::new(cfg, dir)?;
    run.require(Stage::Gen)?;
    let layout = GridLayout::for_dims(cfg.dataset.dims);
    let mut pairs = Vec::new();
    for (j, (_, img, lab)) in run.cases(Split::LabeledTrain)?.into_iter().enumerate() {
        let lab = lab.expect("labeled split");
        let mode = match cfg.concat.perturbation {
            PerturbationKind::None => None,
            PerturbationKind::ShuffleSlices => Some(Perturbation::ShuffleSlices),
            PerturbationKind::RotflipSlices => Some(Perturbation::RotFlipSlices),
        };
        let (img, lab) = match mode {
            Some(m) => {
                let p = perturb(&img, Some(&lab), &m, case_seed(cfg.concat.seed, j))?;
                (p.volume, p.labels.expect("labels were supplied"))
            }
            None => (img, lab),
        };
        pairs.push((concatenate(&img, &layout)?, concatenate(&lab, &layout)?));
    }
    let mut model = build_seg2d(&cfg.seg2d)?;
    let trace = finetune(&mut model, &pairs, &cfg.finetune)?;
    model.save(run.path(SEG2D_CKPT))?;
    std::fs::write(run.path(FINETUNE_TRACE), trace_csv(&trace))?;
    let note = format!(
        "{} grids, L_ft {:.4} -> {:.4}, {} of {} parameters trainable",
        pairs.len(),
        trace.epoch_loss.first().copied().unwrap_or(f64::NAN),
        trace.epoch_loss.last().copied().unwrap_or(f64::NAN),
        model.num_trainable_params(),
        model.num_params()
    );
    run.finish(Stage::Finetune, vec![SEG2D_CKPT.into(), FINETUNE_TRACE.into()], note)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoEntry {
    pub image: String,
    pub pseudo: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PseudoQuality {
    /// Mean Dice of the pseudo-labels against the held-back ground truth (diagnostic only).
    mean_dice: Option<f64>,
    per_case: Vec<(String, f64)>,
}

pub fn cmd_pseudolabel(cfg: &ExperimentConfig, dir: &Path) -> Result<StageSummary> {
    let run = Run::new(cfg, dir)?;
    run.require(Stage::Gen)?;
    run.require(Stage::Finetune)?;
    let model = Seg2D::load(run.path(SEG2D_CKPT))?;
    std::fs::create_dir_all(run.path("pseudo"))?;
    let (mut index, mut outputs, mut quality) = (Vec::new(), Vec::new(), Vec::new());
    let base = run.data_dir();
    for (entry, img, _) in run.cases(Split::UnlabeledTrain)? {
        let pl = pseudo_label(&model, &img)?;
        let name = entry.image.replace(".cfrv", ".pl.cfrv");
        write_volume(run.path("pseudo").join(&name), &StoredVolume::Labels(pl.clone()))?;
        if entry.label.is_some() {
            quality.push((entry.image.clone(), evaluate(&pl, &entry.load_label(&base)?)?.dice));
        }
        outputs.push(format!("pseudo/{name}"));
        index.push(PseudoEntry { image: entry.image, pseudo: name });
    }
    write_json(&run.path(PSEUDO_INDEX), &index)?;
    let mean = (!quality.is_empty()).then(|| quality.iter().map(|q| q.1).sum::<f64>() / quality.len() as f64);
    write_json(&run.path(PSEUDO_QUALITY), &PseudoQuality { mean_dice: mean, per_case: quality })?;
    outputs.push(PSEUDO_INDEX.into());
    outputs.push(PSEUDO_QUALITY.into());
    let note = format!("{} pseudo-labels, mean Dice vs held-back truth {:.2}", index.len(), mean.unwrap_or(f64::NAN));
    run.finish(Stage::Pseudolabel, outputs, note)
}

pub fn cmd_retrain(cfg: &ExperimentConfig, dir: &Path) -> Result<StageSummary> {
    let run = Run::new(cfg, dir)?;
    run.require(Stage::Gen)?;
    let pseudo: Option<Vec<PseudoEntry>> = if cfg.ssl.use_pseudo_labels {
        run.require(Stage::Pseudolabel)?;
        Some(serde_json::from_slice(&std::fs::read(run.path(PSEUDO_INDEX))?)?)
    } else {
        None
    };
    let labeled = run.cases(Split::LabeledTrain)?.into_iter().map(|(_, i, l)| (i, l.expect("labeled"))).collect();
    let mut unlabeled = Vec::new();
    for (entry, image, _) in run.cases(Split::UnlabeledTrain)? {
        let pseudo = match &pseudo {
            Some(index) => {
                let hit = index.iter().find(|p| p.image == entry.image).ok_or_else(|| {
                    cfr_core::CfrError::Missing(format!("pseudo-label for {}", entry.image))
                })?;
                let stored = cfr_core::volume_io::read_volume(run.path("pseudo").join(&hit.pseudo))?;
                Some(stored.into_labels().ok_or_else(|| cfr_core::CfrError::Missing(hit.pseudo.clone()))?)
            }
            None => None,
        };
        unlabeled.push(UnlabeledCase { image, pseudo });
    }
    // The test split is scored for the Dice curve only; nothing is selected on it.
    let val = if cfg.ssl.eval_every > 0 {
        run.cases(Split::Test)?.into_iter().map(|(_, i, l)| (i, l.expect("test labels"))).collect()
    } else {
        Vec::new()
    };
    let data = SslData { labeled, unlabeled, val };
    let (model, trace) = train_ssl(&cfg.seg3d, &cfg.ssl, &data, &PluginRegistry::new())?;
    model.save(run.path(SEG3D_CKPT))?;
    std::fs::write(run.path(TRACE_CSV), trace.to_csv())?;
    write_json(&run.path(TRACE_JSON), &trace)?;
    let last = trace.epochs.last();
    let note = format!(
        "{} epochs, {} steps, final L_sup {:.4}, seg3d {} parameters",
        trace.epochs.len(),
        trace.steps.len(),
        last.map_or(f64::NAN, |e| e.l_sup),
        model.num_params()
    );
    run.finish(Stage::Retrain, vec![SEG3D_CKPT.into(), TRACE_CSV.into(), TRACE_JSON.into()], note)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub image: String,
    pub metrics: MetricsRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub model: String,
    pub cases: Vec<CaseMetrics>,
    pub mean: Option<MetricsRecord>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    image: &'a str,
    class: String,
    dice: f64,
    jaccard: f64,
    asd: Option<f64>,
    hd95: Option<f64>,
}

pub fn cmd_eval(cfg: &ExperimentConfig, dir: &Path, which: EvalModel) -> Result<StageSummary> {
    let run = Run::new(cfg, dir)?;
    run.require(Stage::Gen)?;
    // The re-trained Seg3D alone is the inference model; the 2D model is only
    // scored on request, for fine-tune-stage comparisons.
    enum Model {
        Three(Box<Seg3D>),
        Two(Box<Seg2D>),
    }
    let (stage, model) = match which {
        EvalModel::Seg3d => {
            run.require(Stage::Retrain)?;
            (Stage::Eval, Model::Three(Box::new(Seg3D::load(run.path(SEG3D_CKPT))?)))
        }
        EvalModel::Seg2d => {
            run.require(Stage::Finetune)?;
            (Stage::Eval2d, Model::Two(Box::new(Seg2D::load(run.path(SEG2D_CKPT))?)))
        }
    };
    let mut cases = Vec::new();
    for (entry, img, lab) in run.cases(Split::Test)? {
        let pred = match &model {
            Model::Three(m) => m.predict(&img)?,
            Model::Two(m) => pseudo_label(m, &img)?,
        };
        cases.push(CaseMetrics { image: entry.image, metrics: evaluate(&pred, &lab.expect("test labels"))? });
    }
    let records: Vec<MetricsRecord> = cases.iter().map(|c| c.metrics.clone()).collect();
    let mean = MetricsRecord::mean(&records);
    let (csv_rel, json_rel) = metrics_paths(which);
    std::fs::create_dir_all(run.path("eval"))?;
    let mut w = csv::Writer::from_path(run.path(csv_rel))?;
    let rows = cases.iter().map(|c| (c.image.as_str(), &c.metrics)).chain(mean.as_ref().map(|m| ("mean", m)));
    for (image, m) in rows {
        for c in &m.per_class {
            w.serialize(CsvRow { image, class: c.class.to_string(), dice: c.dice, jaccard: c.jaccard, asd: c.asd, hd95: c.hd95 })?;
        }
        w.serialize(CsvRow { image, class: "mean".into(), dice: m.dice, jaccard: m.jaccard, asd: m.asd, hd95: m.hd95 })?;
    }
    w.flush()?;
    let name = match which {
        EvalModel::Seg3d => "seg3d",
        EvalModel::Seg2d => "seg2d",
    };
    let report = EvalReport { label: cfg.label(), model: name.into(), cases, mean };
    write_json(&run.path(json_rel), &report)?;
    let note = match &report.mean {
        Some(m) => format!("{name} on {} test volumes: Dice {:.2}, Jaccard {:.2}", report.cases.len(), m.dice, m.jaccard),
        None => format!("{name}: no test volumes"),
    };
    run.finish(stage, vec![csv_rel.into(), json_rel.into()], note)
}

/// Loads the evaluation summary and trace of a finished run.
pub fn load_run(dir: &Path) -> Result<(ExperimentConfig, EvalReport, Option<SslTrace>)> {
    let cfg: ExperimentConfig = serde_json::from_slice(&std::fs::read(dir.join(CONFIG_COPY)).map_err(|_| {
        crate::error::CliError::StageOrder(format!("{} is not a run directory; run the pipeline first", dir.display()))
    })?)?;
    require(dir, Stage::Eval, StageKeys::new(&cfg).get(Stage::Eval))?;
    let report: EvalReport = serde_json::from_slice(&std::fs::read(dir.join(metrics_paths(EvalModel::Seg3d).1))?)?;
    let trace = std::fs::read(dir.join(TRACE_JSON)).ok().map(|b| serde_json::from_slice(&b)).transpose()?;
    Ok((cfg, report, trace))
}
