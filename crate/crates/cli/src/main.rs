use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use cfr_cli::{
    cmd_eval, cmd_finetune, cmd_gen, cmd_pseudolabel, cmd_report, cmd_retrain, CliError, EvalModel, ExperimentConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cfr", version, about = "Concatenate, fine-tune, re-train: semi-supervised 3D segmentation stages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a scalar field, e.g. `--set ssl.lambda_max=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Seg3d,
    Seg2d,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms and the labeled / unlabeled / test split.
    Gen(Common),
    /// Fine-tune the 2D model's adapters and decoder on the labeled grids.
    Finetune(Common),
    /// Pseudo-label every unlabeled volume with the fine-tuned 2D model.
    Pseudolabel(Common),
    /// Semi-supervised re-training of the 3D model.
    Retrain(Common),
    /// Score a model on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "seg3d")]
        model: ModelArg,
    },
    /// Markdown table and curves for this run and any runs to compare against.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        compare: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<cfr_cli::StageSummary, CliError> {
    let common = match &cli.command {
        Command::Gen(c) | Command::Finetune(c) | Command::Pseudolabel(c) | Command::Retrain(c) => c,
        Command::Eval { common, .. } | Command::Report { common, .. } => common,
    };
    let cfg = ExperimentConfig::load(common.config.as_deref(), &common.set)?;
    let dir = cfg.run_dir(common.out.as_deref());
    match &cli.command {
        Command::Gen(_) => cmd_gen(&cfg, &dir),
        Command::Finetune(_) => cmd_finetune(&cfg, &dir),
        Command::Pseudolabel(_) => cmd_pseudolabel(&cfg, &dir),
        Command::Retrain(_) => cmd_retrain(&cfg, &dir),
        Command::Eval { model, .. } => {
            let which = match model {
                ModelArg::Seg3d => EvalModel::Seg3d,
                ModelArg::Seg2d => EvalModel::Seg2d,
            };
            cmd_eval(&cfg, &dir, which)
        }
        Command::Report { compare, .. } => cmd_report(&dir, compare),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            // A closed pipe (e.g. `| head`) is not a failure of the stage.
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{}: {}", summary.stage, summary.note);
            for o in &summary.outputs {
                let _ = writeln!(out, "  {}", summary.run_dir.join(o).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
