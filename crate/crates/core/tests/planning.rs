mod common;

use common::*;
use wm_distill::envs::{task_score, Env, Task, EPISODE_LEN};
use wm_distill::experiment::eval::eval_seed;
use wm_distill::experiment::evaluate;
use wm_distill::planner::{random_episode_return, rollout_episode, GroundTruthModel, PlannerConfig};
use wm_distill::tensor::Activation;
use wm_distill::world_model::Preset;

const RANDOM_BAND: f64 = 250.0;

fn seeds(n: usize) -> Vec<u64> {
    (0..n).map(|e| eval_seed(0, Task::PendulumSwingup, e)).collect()
}

#[test]
fn oracle_planner_solves_pendulum() {
    let env = Env::new(Task::PendulumSwingup);
    let oracle = GroundTruthModel::new(env);
    for seed in seeds(3) {
        let (_, ret) = rollout_episode(&env, &oracle, &PlannerConfig::default(), seed).unwrap();
        let score = task_score(ret, EPISODE_LEN).unwrap();
        assert!(score >= 800.0, "seed {seed}: {score}");
    }
}

#[test]
fn random_policy_stays_in_the_random_band() {
    let env = Env::new(Task::PendulumSwingup);
    let scores: Vec<f64> = seeds(10)
        .into_iter()
        .map(|s| task_score(random_episode_return(&env, s).unwrap(), EPISODE_LEN).unwrap())
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!(mean <= RANDOM_BAND, "{mean}");
}

#[test]
fn untrained_model_scores_like_random() {
    // Fresh models predict zero reward and value everywhere.
    let m = model::<f32>(Preset::student(), Activation::Tanh, 3);
    let scores = evaluate(&m, &[Task::PendulumSwingup], 3, 0, &PlannerConfig::default()).unwrap();
    assert!(scores[0].score <= RANDOM_BAND, "{}", scores[0].score);
    assert!(scores[0].score >= 0.0);
}

#[test]
fn evaluation_is_deterministic() {
    let m = model::<f32>(Preset::micro(), Activation::Tanh, 4);
    let cfg = PlannerConfig {
        num_samples: 32,
        num_elites: 4,
        ..Default::default()
    };
    let a = evaluate(&m, &Task::ALL, 2, 7, &cfg).unwrap();
    let b = evaluate(&m, &Task::ALL, 2, 7, &cfg).unwrap();
    assert_eq!(a, b);
}
