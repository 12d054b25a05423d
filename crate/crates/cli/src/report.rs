//! Markdown comparison table and SVG loss / Dice curves for one or more runs.

use std::fmt::Write as _;
use std::path::Path;

use cfr_core::ssl3d::SslTrace;
use plotters::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::stages::{load_run, EvalReport, StageSummary};

pub const REPORT_MD: &str = "report/report.md";
pub const LOSS_SVG: &str = "report/loss.svg";
pub const DICE_SVG: &str = "report/dice.svg";

struct RunView {
    label: String,
    cfg: ExperimentConfig,
    eval: EvalReport,
    trace: Option<SslTrace>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.2}"))
}

/// Method vs Dice / Jaccard / ASD / 95HD, one row per run.
fn table(runs: &[RunView]) -> String {
    let mut s = String::from("| Method | Labeled | Unlabeled | Dice (%) ↑ | Jaccard (%) ↑ | ASD (voxel) ↓ | 95HD (voxel) ↓ |\n");
    s.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
    for r in runs {
        let d = &r.cfg.dataset;
        let (dice, jac, asd, hd) = match &r.eval.mean {
            Some(m) => (format!("{:.2}", m.dice), format!("{:.2}", m.jaccard), opt(m.asd), opt(m.hd95)),
            None => ("n/a".into(), "n/a".into(), "n/a".into(), "n/a".into()),
        };
        let _ = writeln!(s, "| {} | {} | {} | {dice} | {jac} | {asd} | {hd} |", r.label, d.num_labeled, d.train_pool - d.num_labeled);
    }
    s
}

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Plot(e.to_string())
}

type Series = (String, Vec<(f64, f64)>);

fn line_chart(path: &Path, title: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let points = series.iter().flat_map(|s| s.1.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-9 {
        y_max = y_min + 1.0;
    }
    let pad = 0.05 * (y_max - y_min);
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, (y_min - pad)..(y_max + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").y_desc(y_label).draw().map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn loss_series(runs: &[RunView]) -> Vec<Series> {
    let mut out = Vec::new();
    for r in runs {
        let Some(t) = &r.trace else { continue };
        let pick = |f: fn(&cfr_core::ssl3d::EpochRecord) -> f64| t.epochs.iter().map(|e| (e.epoch as f64 + 1.0, f(e))).collect();
        out.push((format!("{} total", r.label), pick(|e| e.total)));
        out.push((format!("{} L_sup", r.label), pick(|e| e.l_sup)));
        if r.cfg.ssl.method != cfr_core::ssl3d::Method::Supervised {
            out.push((format!("{} L_uns", r.label), pick(|e| e.l_uns)));
        }
        if r.cfg.ssl.use_pseudo_labels {
            out.push((format!("{} L_pl", r.label), pick(|e| e.l_pl)));
        }
    }
    out
}

fn dice_series(runs: &[RunView]) -> Vec<Series> {
    runs.iter()
        .filter_map(|r| {
            let pts: Vec<(f64, f64)> = r
                .trace
                .as_ref()?
                .epochs
                .iter()
                .filter_map(|e| e.val_dice.map(|d| (e.epoch as f64 + 1.0, d)))
                .collect();
            (!pts.is_empty()).then(|| (r.label.clone(), pts))
        })
        .collect()
}

/// Writes the report for `dir`, with rows for each run in `compare` after it.
pub fn cmd_report(dir: &Path, compare: &[std::path::PathBuf]) -> Result<StageSummary> {
    let mut runs = Vec::new();
    for d in std::iter::once(dir).chain(compare.iter().map(|p| p.as_path())) {
        let (cfg, eval, trace) = load_run(d)?;
        runs.push(RunView { label: cfg.label(), cfg, eval, trace });
    }
    std::fs::create_dir_all(dir.join("report"))?;
    let mut md = String::from("# Segmentation results\n\n");
    md.push_str(&table(&runs));
    let d = &runs[0].cfg.dataset;
    let _ = write!(
        md,
        "\nTest set: {} phantom volumes of {}×{}×{}, K = {}. Distances in voxels; Dice and Jaccard over foreground classes.\n",
        d.test_pool, d.dims[0], d.dims[1], d.dims[2], d.num_classes
    );
    let mut outputs = vec![REPORT_MD.to_string()];
    let losses = loss_series(&runs);
    if !losses.is_empty() {
        line_chart(&dir.join(LOSS_SVG), "Re-training losses", "loss", &losses)?;
        md.push_str(&format!("\n![losses]({})\n", Path::new(LOSS_SVG).file_name().unwrap().to_string_lossy()));
        outputs.push(LOSS_SVG.into());
    }
    let dice = dice_series(&runs);
    if !dice.is_empty() {
        line_chart(&dir.join(DICE_SVG), "Test Dice during re-training", "Dice (%)", &dice)?;
        md.push_str(&format!("\n![dice]({})\n", Path::new(DICE_SVG).file_name().unwrap().to_string_lossy()));
        outputs.push(DICE_SVG.into());
    }
    std::fs::write(dir.join(REPORT_MD), &md)?;
    Ok(StageSummary { stage: "report".into(), run_dir: dir.to_path_buf(), outputs, note: format!("{} runs tabulated", runs.len()) })
}
