//! Training and distillation loops with periodic evaluation, logging and
//! resumable optimizer state.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::checkpoint::{load_model, model_from_checkpoint, model_to_checkpoint, Checkpoint, TensorRecord};
use crate::dataset::Dataset;
use crate::distill::{
    add_linear_projection, distill_train_step, fit_teacher_pca, heldout_reward_mse, DistillMode, FrozenTeacher,
    Projection, PROJECTION_PARAM,
};
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::rng::rng_from;
use crate::world_model::{LossBreakdown, TrainOptim, WorldModel};

use super::config::RunConfig;
use super::eval::evaluate;
use super::report::{MetricsCsv, RunReport, TaskScore, TIMING_FILE};

pub const MODEL_FILE: &str = "model.tdck";
pub const STATE_FILE: &str = "state.tdck";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";

const INIT_TAG: u64 = 1;
const BATCH_TAG: u64 = 2;
const PROJECTION_TAG: u64 = 3;
const PCA_TAG: u64 = 4;
const ADAM_PREFIX: &str = "adam.";

pub struct TrainOutcome {
    pub report: RunReport,
    pub model: WorldModel<f32>,
    pub checkpoint: Checkpoint,
    pub loss: MetricsCsv,
    pub metrics: MetricsCsv,
    pub eval: MetricsCsv,
    pub last_scores: Vec<TaskScore>,
}

pub fn require_path(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(format!("{what} {}", path.display())))
    }
}

/// Loads the dataset and splits off the held-out episodes.
pub fn load_split(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    require_path(&cfg.data, "dataset directory")?;
    let all = Dataset::load(&cfg.data)?;
    if all.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.holdout_every < 2 {
        return Ok((all, None));
    }
    let (train, held) = all.split_every(cfg.holdout_every)?;
    Ok((train, (!held.is_empty()).then_some(held)))
}

fn state_checkpoint(model: &WorldModel<f32>, opt: &TrainOptim<f32>, meta: &BTreeMap<String, String>) -> Checkpoint {
    let mut ck = model_to_checkpoint(model, meta);
    for (group, adam) in [("model", &opt.model), ("policy", &opt.policy)] {
        ck.metadata.insert(format!("adam_t_{group}"), adam.step_count().to_string());
        for i in 0..adam.params().len() {
            let (m, v) = adam.moments(i);
            for (kind, data) in [("m", m), ("v", v)] {
                ck.tensors.push(TensorRecord::f32(
                    format!("{ADAM_PREFIX}{group}.{kind}.{i}"),
                    vec![data.len()],
                    data.to_vec(),
                ));
            }
        }
    }
    ck
}

struct Resumed {
    model: WorldModel<f32>,
    step: u64,
    state: Checkpoint,
}

fn load_state(path: &Path, cfg: &RunConfig) -> Result<Resumed> {
    require_path(path, "resume state")?;
    let state = Checkpoint::load(path)?;
    let mut model_part = state.clone();
    model_part.tensors.retain(|t| !t.name.starts_with(ADAM_PREFIX));
    let model: WorldModel<f32> = model_from_checkpoint(&model_part)?;
    if model.preset != cfg.preset || model.activation != cfg.activation {
        return Err(Error::Config(format!(
            "resume state holds a {} {} model, config asks for {} {}",
            model.preset.name,
            model.activation.name(),
            cfg.preset.name,
            cfg.activation.name()
        )));
    }
    let step = state.meta_parse("step")?;
    Ok(Resumed { model, step, state })
}

fn restore_optim(opt: &mut TrainOptim<f32>, state: &Checkpoint) -> Result<()> {
    for (group, adam) in [("model", &mut opt.model), ("policy", &mut opt.policy)] {
        let t: u64 = state.meta_parse(&format!("adam_t_{group}"))?;
        let n = adam.params().len();
        let fetch = |kind: &str, i: usize| -> Result<Vec<f32>> {
            let name = format!("{ADAM_PREFIX}{group}.{kind}.{i}");
            state
                .get(&name)
                .map(|t| t.data.to_f32())
                .ok_or_else(|| Error::Format(format!("resume state lacks {name}")))
        };
        let m = (0..n).map(|i| fetch("m", i)).collect::<Result<Vec<_>>>()?;
        let v = (0..n).map(|i| fetch("v", i)).collect::<Result<Vec<_>>>()?;
        adam.restore(t, m, v)?;
    }
    Ok(())
}

fn log_breakdown(metrics: &mut MetricsCsv, step: u64, b: &LossBreakdown) {
    metrics.push(step, "consistency", b.consistency, None);
    metrics.push(step, "reward", b.reward, None);
    metrics.push(step, "value", b.value, None);
    metrics.push(step, "distill", b.distill, None);
}

/// Runs `train` (from scratch) or `distill` as configured, writing every
/// output into `cfg.out`.
pub fn run_training(cfg: &RunConfig, distill: bool) -> Result<TrainOutcome> {
    let started = Instant::now();
    cfg.validate_training()?;
    let teacher = if distill {
        let path = cfg
            .distill
            .teacher_checkpoint
            .as_ref()
            .ok_or_else(|| Error::MissingInput("distill needs teacher=<checkpoint>".into()))?;
        require_path(path, "teacher checkpoint")?;
        Some((FrozenTeacher::new(load_model(path)?), Checkpoint::load(path)?.content_hash_hex()?))
    } else {
        None
    };
    let (train, held) = load_split(cfg)?;

    let resumed = cfg.resume.as_deref().map(|p| load_state(p, cfg)).transpose()?;
    let start = resumed.as_ref().map_or(0, |r| r.step);
    if start > cfg.steps {
        return Err(Error::Config(format!("resume step {start} beyond steps {}", cfg.steps)));
    }
    let mut model = match &resumed {
        Some(r) => r.model.clone(),
        None => WorldModel::new(
            cfg.preset.clone(),
            train.obs_dim(),
            train.act_dim(),
            cfg.activation,
            &mut rng_from(cfg.seed, &[INIT_TAG]),
        ),
    };

    let uses_latent = distill && cfg.distill.d_coef > 0.0 && cfg.distill.mode != DistillMode::RewardOnly;
    let mut extra: Vec<ParamId> = Vec::new();
    let projection = match (&teacher, uses_latent, cfg.distill.mode) {
        (Some((t, _)), true, DistillMode::LatentLinear) => {
            let id = match model.store.find(PROJECTION_PARAM) {
                Some(id) if resumed.is_some() => id,
                _ => add_linear_projection(
                    &mut model,
                    t.model().latent_dim(),
                    &mut rng_from(cfg.seed, &[PROJECTION_TAG]),
                ),
            };
            extra.push(id);
            Projection::Linear(id)
        }
        (Some((t, _)), true, DistillMode::LatentPca) => {
            let k = model.latent_dim();
            if k > t.model().latent_dim() {
                return Err(Error::Config(format!(
                    "student latent {k} wider than teacher latent {}",
                    t.model().latent_dim()
                )));
            }
            Projection::Pca(fit_teacher_pca(t, &train, k, cfg.pca_samples, &mut rng_from(cfg.seed, &[PCA_TAG]))?)
        }
        _ => Projection::None,
    };

    let mut opt = TrainOptim::new(&model, cfg.train.adam, &extra);
    if let Some(r) = &resumed {
        restore_optim(&mut opt, &r.state)?;
    }

    let mut loss = MetricsCsv::default();
    let mut metrics = MetricsCsv::default();
    let mut eval = MetricsCsv::default();
    let mut last_scores = Vec::new();
    let mut report = RunReport::new(if distill { "distill" } else { "train" });
    let eval_steps = cfg.eval_steps();

    let heldout_mse = |model: &WorldModel<f32>| -> Result<Option<f64>> {
        match (&teacher, &held) {
            (Some((t, _)), Some(h)) => heldout_reward_mse(t, model, h).map(Some),
            _ => Ok(None),
        }
    };
    if let Some(mse) = heldout_mse(&model)? {
        metrics.push(start, "heldout_reward_mse", mse, None);
        report.push("heldout_reward_mse_start", mse);
    }

    let mut last = LossBreakdown::default();
    for step in start + 1..=cfg.steps {
        let batch = train.sample_batch(cfg.batch_size, cfg.coeffs.horizon, &mut rng_from(cfg.seed, &[BATCH_TAG, step]))?;
        let b = match &teacher {
            Some((t, _)) => {
                let s = distill_train_step(t, &mut model, &mut opt, &batch, &cfg.coeffs, &cfg.distill, &projection, &cfg.train)?;
                s.breakdown
            }
            None => model.train_step(&mut opt, &batch, &cfg.coeffs, &cfg.train)?,
        };
        if !b.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        if step % cfg.log_interval == 0 {
            loss.push(step, "total", b.total, None);
            log_breakdown(&mut metrics, step, &b);
        }
        if eval_steps.binary_search(&step).is_ok() {
            let scores = evaluate(&model, &cfg.tasks, cfg.eval_episodes, cfg.seed, &cfg.planner)?;
            for s in &scores {
                eval.push(step, "score", s.score, Some(s.task));
            }
            let norm = super::report::normalized_score(&scores.iter().map(|s| s.score).collect::<Vec<_>>())?;
            eval.push(step, "normalized_score", norm, None);
            if let Some(mse) = heldout_mse(&model)? {
                metrics.push(step, "heldout_reward_mse", mse, None);
            }
            last_scores = scores;
        }
        last = b;
    }

    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), cfg.seed.to_string());
    meta.insert("step".to_string(), cfg.steps.to_string());
    let c = &cfg.coeffs;
    for (k, v) in [
        ("alpha_consistency", c.alpha_consistency),
        ("alpha_reward", c.alpha_reward),
        ("alpha_value", c.alpha_value),
        ("rho", c.rho),
        ("gamma", c.gamma),
    ] {
        meta.insert(k.to_string(), v.to_string());
    }
    meta.insert("horizon".to_string(), c.horizon.to_string());
    let checkpoint = model_to_checkpoint(&model, &meta);
    std::fs::create_dir_all(&cfg.out)?;
    cfg.write(&cfg.out)?;
    checkpoint.save(&cfg.out.join(MODEL_FILE))?;
    state_checkpoint(&model, &opt, &meta).save(&cfg.out.join(STATE_FILE))?;
    loss.write(&cfg.out.join(LOSS_FILE))?;
    metrics.write(&cfg.out.join(METRICS_FILE))?;
    eval.write(&cfg.out.join(EVAL_FILE))?;

    report.scores = last_scores.clone();
    report.push("steps", cfg.steps);
    report.push("final_total_loss", last.total);
    report.push("num_params", model.num_params());
    report.push("checkpoint_sha256", checkpoint.content_hash_hex()?);
    if let Some((t, file_hash)) = &teacher {
        let path = cfg.distill.teacher_checkpoint.as_ref().expect("teacher path");
        let after = Checkpoint::load(path)?.content_hash_hex()?;
        report.push("teacher_sha256", file_hash);
        report.push("teacher_sha256_after", &after);
        report.push("teacher_unchanged", t.fingerprint() == t.current_fingerprint() && *file_hash == after);
        if let Some(mse) = heldout_mse(&model)? {
            report.push("heldout_reward_mse_final", mse);
        }
    }
    report.write(&cfg.out)?;
    std::fs::write(
        cfg.out.join(TIMING_FILE),
        format!("wall_clock_seconds={:.3}\n", started.elapsed().as_secs_f64()),
    )?;

    Ok(TrainOutcome {
        report,
        model,
        checkpoint,
        loss,
        metrics,
        eval,
        last_scores,
    })
}

/// Loads a model checkpoint for evaluation or quantization.
pub fn load_checkpoint_model(path: &Path) -> Result<(Checkpoint, WorldModel<f32>)> {
    require_path(path, "checkpoint")?;
    let ck = Checkpoint::load(path)?;
    let model = model_from_checkpoint(&ck)?;
    Ok((ck, model))
}
