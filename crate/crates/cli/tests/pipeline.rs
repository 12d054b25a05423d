//! End-to-end runs of the stage commands on a tiny phantom dataset.

use std::path::{Path, PathBuf};
use std::process::Command;

use cfr_cli::stages::{load_run, CONFIG_COPY, SEG3D_CKPT, TRACE_CSV};
use cfr_cli::{cmd_eval, cmd_finetune, cmd_gen, cmd_pseudolabel, cmd_report, cmd_retrain, EvalModel, ExperimentConfig};

const TINY: &str = r#"{
  "dataset": {"dims": [16, 16, 8], "train_pool": 4, "num_labeled": 1, "test_pool": 2},
  "seg2d": {"input_size": 32, "patch_size": 8, "embed_dim": 16, "depth": 1, "num_heads": 2,
            "num_classes": 2, "lora_rank": 2, "decoder_channels": [8, 4], "seed": 0},
  "lora": {"rank": 2},
  "finetune": {"epochs": 3},
  "seg3d": {"base_channels": 2, "levels": 2, "convs_per_level": 1},
  "ssl": {"epochs": 2, "ramp_len": 1.0, "eval_every": 1}
}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn config(path: &Path, sets: &[&str]) -> ExperimentConfig {
    let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(Some(path), &sets).unwrap()
}

fn full_pipeline(cfg: &ExperimentConfig, dir: &Path) {
    cmd_gen(cfg, dir).unwrap();
    cmd_finetune(cfg, dir).unwrap();
    cmd_pseudolabel(cfg, dir).unwrap();
    cmd_retrain(cfg, dir).unwrap();
    cmd_eval(cfg, dir, EvalModel::Seg3d).unwrap();
}

fn cfr(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cfr")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn pipeline_is_byte_reproducible_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(&tiny_config(tmp.path()), &[]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    full_pipeline(&cfg, &a);
    full_pipeline(&cfg, &b);
    for rel in ["data/manifest.json", "seg2d.ckpt", "pseudo/index.json", SEG3D_CKPT, TRACE_CSV, "eval/metrics.json"] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel} differs");
    }
    cmd_eval(&cfg, &a, EvalModel::Seg2d).unwrap();
    let summary = cmd_report(&a, std::slice::from_ref(&b)).unwrap();
    assert!(summary.outputs.iter().any(|o| o.ends_with("loss.svg")));
    let md = std::fs::read_to_string(a.join("report/report.md")).unwrap();
    assert_eq!(md.matches("| CFR_MT | 1 | 3 |").count(), 2, "{md}");
    let svg = std::fs::read_to_string(a.join("report/dice.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    let (_, report, trace) = load_run(&a).unwrap();
    assert_eq!(report.cases.len(), 2);
    assert_eq!(trace.unwrap().epochs.len(), 2);
}

#[test]
fn zero_weight_matches_labeled_only() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tiny_config(tmp.path());
    let mt = config(&path, &["ssl.lambda_max=0", "ssl.eval_every=0"]);
    // λ scales both unlabeled terms, so the baseline drops pseudo-labels too.
    let sup = config(&path, &["ssl.method=supervised", "ssl.use_pseudo_labels=false", "ssl.eval_every=0"]);
    let (a, b) = (tmp.path().join("mt0"), tmp.path().join("sup"));
    full_pipeline(&mt, &a);
    full_pipeline(&sup, &b);
    assert_eq!(std::fs::read(a.join(SEG3D_CKPT)).unwrap(), std::fs::read(b.join(SEG3D_CKPT)).unwrap());
    let (_, ra, _) = load_run(&a).unwrap();
    let (_, rb, _) = load_run(&b).unwrap();
    assert_eq!(ra.cases, rb.cases);
    assert_ne!(ra.label, rb.label);
}

#[test]
fn exit_codes_for_bad_config_and_stage_order() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tiny_config(tmp.path());
    let p = path.to_str().unwrap();
    let run = tmp.path().join("run");
    let r = run.to_str().unwrap();

    assert_eq!(cfr(&["gen", "--config", p, "--out", r, "--set", "ssl.nope=1"]).0, 2);
    assert_eq!(cfr(&["gen", "--config", p, "--out", r, "--set", "lora.rank=3"]).0, 2);
    assert_eq!(cfr(&["gen", "--config", p, "--out", r, "--set", "novalue"]).0, 2);

    // Nothing generated yet.
    let (code, err) = cfr(&["finetune", "--config", p, "--out", r]);
    assert_eq!(code, 3, "{err}");

    assert_eq!(cfr(&["gen", "--config", p, "--out", r]).0, 0);
    assert_eq!(cfr(&["pseudolabel", "--config", p, "--out", r]).0, 3);
    assert_eq!(cfr(&["finetune", "--config", p, "--out", r]).0, 0);

    // A different upstream setting invalidates the fine-tuned checkpoint.
    assert_eq!(cfr(&["pseudolabel", "--config", p, "--out", r, "--set", "finetune.epochs=4"]).0, 3);
    // So does tampering with the artifact itself.
    let ckpt = run.join("seg2d.ckpt");
    let original = std::fs::read(&ckpt).unwrap();
    let mut bytes = original.clone();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&ckpt, &bytes).unwrap();
    assert_eq!(cfr(&["pseudolabel", "--config", p, "--out", r]).0, 3);
    std::fs::write(&ckpt, &original).unwrap();
    assert_eq!(cfr(&["pseudolabel", "--config", p, "--out", r]).0, 0);

    // Downstream-only settings leave upstream stamps valid.
    assert_eq!(cfr(&["retrain", "--config", p, "--out", r, "--set", "ssl.lambda_max=0.5"]).0, 0);
    assert_eq!(cfr(&["eval", "--config", p, "--out", r]).0, 3);
    assert_eq!(cfr(&["eval", "--config", p, "--out", r, "--set", "ssl.lambda_max=0.5"]).0, 0);
    let saved: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join(CONFIG_COPY)).unwrap()).unwrap();
    assert_eq!(saved["ssl"]["lambda_max"], serde_json::json!(0.5));
    assert_eq!(cfr(&["report", "--config", p, "--out", r, "--set", "ssl.lambda_max=0.5"]).0, 0);
    assert!(run.join("report/report.md").exists());
}
