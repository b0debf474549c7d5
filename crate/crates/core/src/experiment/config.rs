//! Run configuration: defaults, `key = value` files and overrides. The
//! resolved form is written beside every run's outputs.

use std::path::{Path, PathBuf};

use crate::distill::{DistillConfig, DistillMode, PCA_SAMPLES};
use crate::envs::{parse_tasks, Task};
use crate::error::{Error, Result};
use crate::planner::PlannerConfig;
use crate::tensor::Activation;
use crate::world_model::{LossCoeffs, Preset, TrainSettings};

pub const CONFIG_FILE: &str = "config.txt";
/// Distillation-coefficient grid swept by default.
pub const DEFAULT_GRID: &str = "d_coef=0.05,0.25,0.4,0.55,0.6,0.9";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: PathBuf,
    pub out: PathBuf,
    pub tasks: Vec<Task>,

    pub preset: Preset,
    pub activation: Activation,
    pub steps: u64,
    pub batch_size: usize,
    pub log_interval: u64,
    /// Eval every `eval_fraction` of training; 0 disables periodic eval.
    pub eval_fraction: f64,
    pub eval_episodes: usize,
    /// Every `holdout_every`-th episode is held out of training.
    pub holdout_every: usize,
    pub coeffs: LossCoeffs,
    pub train: TrainSettings,

    pub distill: DistillConfig,
    pub pca_samples: usize,

    pub planner: PlannerConfig,

    pub resume: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub episodes_per_task: usize,
    pub policy: String,
    pub quant_eval: bool,
    pub grid: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: PathBuf::from("data"),
            out: PathBuf::from("runs"),
            tasks: Task::ALL.to_vec(),
            preset: Preset::student(),
            activation: Activation::Tanh,
            steps: 10_000,
            batch_size: 256,
            log_interval: 100,
            eval_fraction: 0.1,
            eval_episodes: 10,
            holdout_every: 10,
            coeffs: LossCoeffs::default(),
            train: TrainSettings::default(),
            distill: DistillConfig::default(),
            pca_samples: PCA_SAMPLES,
            planner: PlannerConfig::default(),
            resume: None,
            checkpoint: None,
            episodes_per_task: 600,
            policy: "mixture".into(),
            quant_eval: true,
            grid: DEFAULT_GRID.into(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "data" => self.data = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "tasks" => self.tasks = parse_tasks(v)?,
            "preset" => self.preset = Preset::parse(v)?,
            "activation" => self.activation = Activation::parse(v)?,
            "steps" => self.steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "log_interval" => self.log_interval = num(key, v)?,
            "eval_fraction" => self.eval_fraction = num(key, v)?,
            "eval_episodes" => self.eval_episodes = num(key, v)?,
            "holdout_every" => self.holdout_every = num(key, v)?,
            "alpha_consistency" => self.coeffs.alpha_consistency = num(key, v)?,
            "alpha_reward" => self.coeffs.alpha_reward = num(key, v)?,
            "alpha_value" => self.coeffs.alpha_value = num(key, v)?,
            "rho" => self.coeffs.rho = num(key, v)?,
            "horizon" => self.coeffs.horizon = num(key, v)?,
            "gamma" => self.coeffs.gamma = num(key, v)?,
            "lr" => self.train.adam.lr = num(key, v)?,
            "beta1" => self.train.adam.beta1 = num(key, v)?,
            "beta2" => self.train.adam.beta2 = num(key, v)?,
            "adam_eps" => self.train.adam.eps = num(key, v)?,
            "tau" => self.train.tau = num(key, v)?,
            "grad_clip" => self.train.grad_clip = num(key, v)?,
            "d_coef" => self.distill.d_coef = num(key, v)?,
            "mode" => self.distill.mode = DistillMode::parse(v)?,
            "latent_coef" => self.distill.latent_coef = num(key, v)?,
            "teacher" => self.distill.teacher_checkpoint = opt_path(v),
            "pca_samples" => self.pca_samples = num(key, v)?,
            "plan_horizon" => self.planner.horizon = num(key, v)?,
            "plan_samples" => self.planner.num_samples = num(key, v)?,
            "plan_elites" => self.planner.num_elites = num(key, v)?,
            "plan_iterations" => self.planner.iterations = num(key, v)?,
            "plan_temperature" => self.planner.temperature = num(key, v)?,
            "plan_min_std" => self.planner.min_std = num(key, v)?,
            "plan_max_std" => self.planner.max_std = num(key, v)?,
            "plan_policy_frac" => self.planner.policy_frac = num(key, v)?,
            "plan_gamma" => self.planner.gamma = num(key, v)?,
            "resume" => self.resume = opt_path(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "episodes_per_task" => self.episodes_per_task = num(key, v)?,
            "policy" => self.policy = v.to_string(),
            "quant_eval" => self.quant_eval = num(key, v)?,
            "grid" => self.grid = v.to_string(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(Error::MissingInput(format!("config file {}", path.display())));
        }
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let tasks: Vec<&str> = self.tasks.iter().map(|t| t.name()).collect();
        let p = &self.planner;
        vec![
            ("seed", self.seed.to_string()),
            ("data", self.data.display().to_string()),
            ("out", self.out.display().to_string()),
            ("tasks", tasks.join(",")),
            ("preset", self.preset.name.clone()),
            ("activation", self.activation.name().into()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("eval_fraction", self.eval_fraction.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("holdout_every", self.holdout_every.to_string()),
            ("alpha_consistency", self.coeffs.alpha_consistency.to_string()),
            ("alpha_reward", self.coeffs.alpha_reward.to_string()),
            ("alpha_value", self.coeffs.alpha_value.to_string()),
            ("rho", self.coeffs.rho.to_string()),
            ("horizon", self.coeffs.horizon.to_string()),
            ("gamma", self.coeffs.gamma.to_string()),
            ("lr", self.train.adam.lr.to_string()),
            ("beta1", self.train.adam.beta1.to_string()),
            ("beta2", self.train.adam.beta2.to_string()),
            ("adam_eps", self.train.adam.eps.to_string()),
            ("tau", self.train.tau.to_string()),
            ("grad_clip", self.train.grad_clip.to_string()),
            ("d_coef", self.distill.d_coef.to_string()),
            ("mode", self.distill.mode.name().into()),
            ("latent_coef", self.distill.latent_coef.to_string()),
            ("teacher", path_str(&self.distill.teacher_checkpoint)),
            ("pca_samples", self.pca_samples.to_string()),
            ("plan_horizon", p.horizon.to_string()),
            ("plan_samples", p.num_samples.to_string()),
            ("plan_elites", p.num_elites.to_string()),
            ("plan_iterations", p.iterations.to_string()),
            ("plan_temperature", p.temperature.to_string()),
            ("plan_min_std", p.min_std.to_string()),
            ("plan_max_std", p.max_std.to_string()),
            ("plan_policy_frac", p.policy_frac.to_string()),
            ("plan_gamma", p.gamma.to_string()),
            ("resume", path_str(&self.resume)),
            ("checkpoint", path_str(&self.checkpoint)),
            ("episodes_per_task", self.episodes_per_task.to_string()),
            ("policy", self.policy.clone()),
            ("quant_eval", self.quant_eval.to_string()),
            ("grid", self.grid.clone()),
        ]
    }

    /// Resolved `key=value` text; parsing it back gives an equal config.
    pub fn to_text(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn validate_training(&self) -> Result<()> {
        self.coeffs.validate()?;
        self.distill.validate()?;
        self.planner.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval_fraction) {
            return Err(Error::Config(format!("eval_fraction {} outside [0, 1]", self.eval_fraction)));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks".into()));
        }
        Ok(())
    }

    /// Steps at which periodic evaluation runs.
    pub fn eval_steps(&self) -> Vec<u64> {
        if self.eval_fraction <= 0.0 || self.eval_episodes == 0 {
            return Vec::new();
        }
        let every = ((self.steps as f64 * self.eval_fraction).round() as u64).max(1);
        (1..=self.steps).filter(|s| s % every == 0).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), self.to_text())?;
        Ok(())
    }
}
