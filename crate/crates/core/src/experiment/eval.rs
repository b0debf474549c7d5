//! Planner evaluation, fanned out over threads with per-episode seeds.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::dataset::EVAL_SEED_BIT;
use crate::envs::{task_score, Env, Task};
use crate::error::{Error, Result};
use crate::planner::{rollout_episode, PlannerConfig, PlanningModel};
use crate::rng::derive_seed;

use super::report::TaskScore;

pub const THREADS_ENV: &str = "WM_DISTILL_THREADS";
const EVAL_TAG: u64 = 0xe7a1;

/// Seed of evaluation episode `episode` of `task`. The top bit is always set,
/// so it never equals a data-collection seed.
pub fn eval_seed(seed: u64, task: Task, episode: usize) -> u64 {
    EVAL_SEED_BIT | (derive_seed(seed, &[EVAL_TAG, task.index() as u64, episode as u64]) >> 1)
}

/// Worker count: `WM_DISTILL_THREADS` when set, else the available cores.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `jobs` closures on up to `threads` workers; results keep job order.
pub fn run_parallel<T: Send, F: Fn(usize) -> T + Sync>(jobs: usize, threads: usize, f: F) -> Vec<T> {
    let threads = threads.clamp(1, jobs.max(1));
    if threads == 1 {
        return (0..jobs).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                let r = f(i);
                results.lock().expect("eval worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("eval worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Per-task mean score of `episodes` planner rollouts.
pub fn evaluate<M: PlanningModel + ?Sized>(
    model: &M,
    tasks: &[Task],
    episodes: usize,
    seed: u64,
    planner: &PlannerConfig,
) -> Result<Vec<TaskScore>> {
    if episodes == 0 {
        return Err(Error::Config("eval needs at least one episode per task".into()));
    }
    planner.validate()?;
    let jobs: Vec<(Task, usize)> = tasks
        .iter()
        .flat_map(|&t| (0..episodes).map(move |e| (t, e)))
        .collect();
    let returns = run_parallel(jobs.len(), eval_threads(), |i| {
        let (task, ep) = jobs[i];
        rollout_episode(&Env::new(task), model, planner, eval_seed(seed, task, ep)).map(|(_, r)| r)
    });
    let mut out = Vec::with_capacity(tasks.len());
    for (k, &task) in tasks.iter().enumerate() {
        let rets = returns[k * episodes..(k + 1) * episodes]
            .iter()
            .map(|r| r.as_ref().copied().map_err(|e| Error::Invalid(format!("{} eval: {e}", task.name()))))
            .collect::<Result<Vec<f64>>>()?;
        let len = task.spec().episode_len;
        let mut total = 0.0;
        for &r in &rets {
            total += task_score(r.clamp(0.0, len as f64), len)?;
        }
        out.push(TaskScore {
            task,
            score: total / episodes as f64,
            returns: rets,
        });
    }
    Ok(out)
}
