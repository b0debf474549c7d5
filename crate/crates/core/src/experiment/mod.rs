//! Experiment commands: data generation, training, distillation,
//! evaluation, quantization and sweeps.

pub mod config;
pub mod eval;
pub mod report;
pub mod sweep;
pub mod train;

use std::time::Instant;

use crate::checkpoint::load_model;
use crate::dataset::{generate_dataset, BehaviorPolicy, Dataset};
use crate::envs::task_score;
use crate::error::{Error, Result};
use crate::quant::{dequantize_inference, to_fp16};

pub use config::RunConfig;
pub use eval::evaluate;
pub use report::{normalized_score, MetricsCsv, RunReport, TaskScore};
pub use sweep::{run_sweep, CellResult};
pub use train::{run_training, TrainOutcome};

use report::TIMING_FILE;
use train::{load_checkpoint_model, require_path, EVAL_FILE};

pub const F16_MODEL_FILE: &str = "model_f16.tdck";
pub const QUANT_CSV_FILE: &str = "quant.csv";

fn write_timing(cfg: &RunConfig, started: Instant) -> Result<()> {
    std::fs::write(
        cfg.out.join(TIMING_FILE),
        format!("wall_clock_seconds={:.3}\n", started.elapsed().as_secs_f64()),
    )?;
    Ok(())
}

fn behavior_policy(spec: &str) -> Result<BehaviorPolicy> {
    match spec.strip_prefix("agent:") {
        Some(path) => {
            let path = std::path::Path::new(path);
            require_path(path, "agent checkpoint")?;
            Ok(BehaviorPolicy::Agent(Box::new(load_model(path)?)))
        }
        None => BehaviorPolicy::parse_simple(spec),
    }
}

/// Generates an episode dataset into `cfg.out`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<RunReport> {
    let started = Instant::now();
    if cfg.episodes_per_task == 0 || cfg.tasks.is_empty() {
        return Err(Error::Config("gen-data needs tasks and episodes_per_task >= 1".into()));
    }
    let policy = behavior_policy(&cfg.policy)?;
    let manifest = generate_dataset(&cfg.out, &cfg.tasks, &policy, cfg.episodes_per_task, cfg.seed)?;
    cfg.write(&cfg.out)?;
    let data = Dataset::load(&cfg.out)?;
    let mut report = RunReport::new("gen-data");
    report.push("episodes", manifest.entries.len());
    for &task in &cfg.tasks {
        let eps: Vec<_> = data.episodes.iter().filter(|e| e.task == task).collect();
        let mut sum = 0.0;
        for e in &eps {
            sum += task_score(e.return_sum().clamp(0.0, e.len() as f64), e.len())?;
        }
        report.push(format!("behavior_score.{}", task.name()), sum / eps.len() as f64);
    }
    report.write(&cfg.out)?;
    write_timing(cfg, started)?;
    Ok(report)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<RunReport> {
    run_training(cfg, false).map(|o| o.report)
}

pub fn cmd_distill(cfg: &RunConfig) -> Result<RunReport> {
    run_training(cfg, true).map(|o| o.report)
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&std::path::Path> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| Error::MissingInput("no checkpoint given (checkpoint=<path>)".into()))
}

/// Planner evaluation of a checkpoint on every configured task.
pub fn cmd_eval(cfg: &RunConfig) -> Result<RunReport> {
    let started = Instant::now();
    let (ck, model) = load_checkpoint_model(checkpoint_path(cfg)?)?;
    let scores = evaluate(&model, &cfg.tasks, cfg.eval_episodes, cfg.seed, &cfg.planner)?;
    std::fs::create_dir_all(&cfg.out)?;
    cfg.write(&cfg.out)?;
    let mut csv = MetricsCsv::default();
    for s in &scores {
        csv.push(0, "score", s.score, Some(s.task));
    }
    let mut report = RunReport::new("eval");
    report.scores = scores;
    csv.push(0, "normalized_score", report.normalized()?, None);
    csv.write(&cfg.out.join(EVAL_FILE))?;
    report.push("checkpoint_sha256", ck.content_hash_hex()?);
    report.push("episodes_per_task", cfg.eval_episodes);
    report.write(&cfg.out)?;
    write_timing(cfg, started)?;
    Ok(report)
}

/// Converts a checkpoint to FP16 and, when `quant_eval` is set, evaluates
/// the float and FP16 models on the same seeds.
pub fn cmd_quantize(cfg: &RunConfig) -> Result<RunReport> {
    let started = Instant::now();
    let (ck, model) = load_checkpoint_model(checkpoint_path(cfg)?)?;
    let (q, qr) = to_fp16(&ck)?;
    std::fs::create_dir_all(&cfg.out)?;
    cfg.write(&cfg.out)?;
    q.save(&cfg.out.join(F16_MODEL_FILE))?;
    std::fs::write(cfg.out.join(QUANT_CSV_FILE), qr.to_csv())?;

    let mut report = RunReport::new("quantize");
    report.push("checkpoint_sha256", ck.content_hash_hex()?);
    report.push("f16_checkpoint_sha256", q.content_hash_hex()?);
    report.push("bytes_before", qr.bytes_before);
    report.push("bytes_after", qr.bytes_after);
    report.push("size_ratio", qr.ratio());
    report.push("max_abs_err", qr.max_abs_err());
    report.push("max_rel_err", qr.max_rel_err());
    report.push("overflow_count", qr.overflow_count);
    if cfg.quant_eval {
        let f16_model = dequantize_inference(&q)?;
        let float = evaluate(&model, &cfg.tasks, cfg.eval_episodes, cfg.seed, &cfg.planner)?;
        let half = evaluate(&f16_model, &cfg.tasks, cfg.eval_episodes, cfg.seed, &cfg.planner)?;
        let mut csv = MetricsCsv::default();
        for (f, h) in float.iter().zip(&half) {
            csv.push(0, "score_float", f.score, Some(f.task));
            csv.push(0, "score_f16", h.score, Some(h.task));
            report.push(format!("float_score.{}", f.task.name()), f.score);
        }
        let float_norm = normalized_score(&float.iter().map(|s| s.score).collect::<Vec<_>>())?;
        report.scores = half;
        let f16_norm = report.normalized()?;
        csv.push(0, "normalized_score_float", float_norm, None);
        csv.push(0, "normalized_score_f16", f16_norm, None);
        csv.write(&cfg.out.join(EVAL_FILE))?;
        report.push("float_normalized_score", float_norm);
        report.push("f16_normalized_score", f16_norm);
        report.push("normalized_score_delta", (f16_norm - float_norm).abs());
    }
    report.write(&cfg.out)?;
    write_timing(cfg, started)?;
    Ok(report)
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<CellResult>> {
    let started = Instant::now();
    let results = run_sweep(cfg)?;
    write_timing(cfg, started)?;
    Ok(results)
}
