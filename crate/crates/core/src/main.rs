use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wm_distill::experiment::{self, RunConfig};
use wm_distill::Error;

#[derive(Parser)]
#[command(name = "wm-distill", version, about = "Latent world-model training, distillation and quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an episode dataset with a behaviour policy.
    GenData(Common),
    /// Train a model from scratch.
    Train(Common),
    /// Train a student with reward distillation from a frozen teacher.
    Distill(Common),
    /// Evaluate a checkpoint with the planner.
    Eval(Common),
    /// Convert a checkpoint to FP16 and compare scores.
    Quantize(Common),
    /// Run a grid of distillation or training cells.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Key-value config file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (the dataset directory for gen-data).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Teacher checkpoint for distill.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Checkpoint for eval and quantize.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Optimizer state to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_coef: Option<f64>,
    #[arg(long)]
    preset: Option<String>,
    /// reward_only, latent_linear or latent_pca.
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated task names or `all`.
    #[arg(long)]
    tasks: Option<String>,
    /// Evaluation episodes per task.
    #[arg(long)]
    episodes: Option<usize>,
    /// Sweep grid, e.g. `d_coef=0.05,0.4;batch_steps=256x2000`.
    #[arg(long)]
    grid: Option<String>,
    /// Any config key as key=value; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        cfg.apply_overrides(&self.set)?;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", path(&self.out)),
            ("data", path(&self.data)),
            ("teacher", path(&self.teacher)),
            ("checkpoint", path(&self.checkpoint)),
            ("resume", path(&self.resume)),
            ("steps", self.steps.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("d_coef", self.d_coef.map(|v| v.to_string())),
            ("preset", self.preset.clone()),
            ("mode", self.mode.clone()),
            ("tasks", self.tasks.clone()),
            ("eval_episodes", self.episodes.map(|v| v.to_string())),
            ("grid", self.grid.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let (common, name) = match &cli.command {
        Command::GenData(c) => (c, "gen-data"),
        Command::Train(c) => (c, "train"),
        Command::Distill(c) => (c, "distill"),
        Command::Eval(c) => (c, "eval"),
        Command::Quantize(c) => (c, "quantize"),
        Command::Sweep(c) => (c, "sweep"),
    };
    let cfg = common.resolve()?;
    let report = match cli.command {
        Command::GenData(_) => experiment::cmd_gen_data(&cfg)?,
        Command::Train(_) => experiment::cmd_train(&cfg)?,
        Command::Distill(_) => experiment::cmd_distill(&cfg)?,
        Command::Eval(_) => experiment::cmd_eval(&cfg)?,
        Command::Quantize(_) => experiment::cmd_quantize(&cfg)?,
        Command::Sweep(_) => {
            let results = experiment::cmd_sweep(&cfg)?;
            print!("{}", experiment::sweep::results_csv(&results));
            return Ok(());
        }
    };
    print!("{}", report.to_text()?);
    eprintln!("{name}: outputs in {}", cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::MissingInput(_) | Error::Config(_) | Error::UnknownTask(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
