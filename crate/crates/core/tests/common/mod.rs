#![allow(dead_code)]

use std::path::Path;

use rand::{Rng as _, SeedableRng};
use wm_distill::dataset::{Dataset, Episode, TransitionBatch};
use wm_distill::distill::{distill_terms, FrozenTeacher, Projection};
use wm_distill::envs::{Env, Task, MODEL_OBS_DIM};
use wm_distill::experiment::RunConfig;
use wm_distill::params::ParamId;
use wm_distill::rng::Rng;
use wm_distill::tensor::{Activation, Graph, Var};
use wm_distill::world_model::{LossCoeffs, LossTargets, Preset, WorldModel};

pub const FD_EPS: f64 = 1e-4;

/// Episodes of every task driven by seeded random actions.
pub fn random_dataset(episodes_per_task: usize, len: usize, seed: u64) -> Dataset {
    let mut rng = Rng::seed_from_u64(seed);
    let mut eps = Vec::new();
    for task in Task::ALL {
        let env = Env::new(task);
        for _ in 0..episodes_per_task {
            let (mut s, obs) = env.reset(rng.random());
            let mut ep = Episode {
                task,
                obs_dim: task.obs_dim(),
                act_dim: 1,
                obs,
                actions: vec![],
                rewards: vec![],
            };
            for _ in 0..len {
                let a = rng.random_range(-1.0f32..=1.0);
                let st = env.step(&s, &[a]).unwrap();
                ep.actions.push(a);
                ep.rewards.push(st.reward);
                ep.obs.extend_from_slice(&st.obs);
                s = st.state;
            }
            eps.push(ep);
        }
    }
    Dataset::new(eps).unwrap()
}

pub fn model<F: wm_distill::tensor::Real>(preset: Preset, activation: Activation, seed: u64) -> WorldModel<F> {
    WorldModel::new(preset, MODEL_OBS_DIM, 1, activation, &mut Rng::seed_from_u64(seed))
}

/// Randomizes every parameter (including zero-initialized output layers) so
/// no gradient vanishes by construction.
pub fn jitter(model: &mut WorldModel<f64>, scale: f64, seed: u64) {
    let mut rng = Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        for x in model.store.value_mut(id).data_mut() {
            *x += scale * rng.random_range(-1.0..1.0);
        }
    }
}

pub fn trainable(model: &WorldModel<f64>) -> Vec<ParamId> {
    model.store.ids().filter(|&id| model.store.is_trainable(id)).collect()
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over `params`, with
/// central differences of `f` at `FD_EPS`.
pub fn fd_rel_error(
    model: &WorldModel<f64>,
    params: &[ParamId],
    analytic: impl Fn(ParamId) -> Vec<f64>,
    f: impl Fn(&WorldModel<f64>) -> f64,
) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    let mut probe = model.clone();
    for &id in params {
        let a = analytic(id);
        for (j, &aj) in a.iter().enumerate() {
            let orig = probe.store.value(id).data()[j];
            probe.store.value_mut(id).data_mut()[j] = orig + FD_EPS;
            let up = f(&probe);
            probe.store.value_mut(id).data_mut()[j] = orig - FD_EPS;
            let down = f(&probe);
            probe.store.value_mut(id).data_mut()[j] = orig;
            let n = (up - down) / (2.0 * FD_EPS);
            diff += (aj - n) * (aj - n);
            na += aj * aj;
            nn += n * n;
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    assert!(denom > 1e-8, "gradient vanished");
    diff.sqrt() / denom
}

fn grad_of(model: &WorldModel<f64>, g: &Graph<f64>, v: Var, id: ParamId) -> Vec<f64> {
    let grads = g.backward(v).unwrap();
    grads
        .get(model.store.key(id))
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; model.store.value(id).numel()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Consistency,
    Reward,
    Value,
}

/// FD check of one original-loss component with targets held fixed.
pub fn check_original(model: &WorldModel<f64>, batch: &TransitionBatch, coeffs: &LossCoeffs, c: Component) -> f64 {
    let targets: LossTargets<f64> = model.loss_targets(batch, coeffs).unwrap();
    let (_, lg) = model.original_loss_with_targets(batch, coeffs, targets.clone()).unwrap();
    let var = match c {
        Component::Consistency => lg.consistency,
        Component::Reward => lg.reward,
        Component::Value => lg.value,
    };
    let params = trainable(model);
    fd_rel_error(
        model,
        &params,
        |id| grad_of(model, &lg.graph, var, id),
        |m| {
            let (b, _) = m.original_loss_with_targets(batch, coeffs, targets.clone()).unwrap();
            match c {
                Component::Consistency => b.consistency,
                Component::Reward => b.reward,
                Component::Value => b.value,
            }
        },
    )
}

/// FD check of the reward (`latent == false`) or latent distillation term.
pub fn check_distill(
    teacher: &FrozenTeacher<f64>,
    student: &WorldModel<f64>,
    batch: &TransitionBatch,
    horizon: usize,
    projection: &Projection,
    latent: bool,
) -> f64 {
    let eval = |m: &WorldModel<f64>| -> (Graph<f64>, Var) {
        let mut g = Graph::new();
        let t = distill_terms(&mut g, teacher, m, batch, horizon, projection).unwrap();
        let v = if latent { t.latent.expect("latent term") } else { t.reward };
        (g, v)
    };
    let (g, v) = eval(student);
    let params = trainable(student);
    fd_rel_error(
        student,
        &params,
        |id| grad_of(student, &g, v, id),
        |m| {
            let (g, v) = eval(m);
            g.item(v).unwrap()
        },
    )
}

/// Config for quick runs: no periodic eval, small batches.
pub fn quick_config(data: &Path, out: &Path, steps: u64) -> RunConfig {
    RunConfig {
        data: data.to_path_buf(),
        out: out.to_path_buf(),
        steps,
        batch_size: 32,
        log_interval: 10,
        eval_fraction: 0.0,
        eval_episodes: 1,
        ..Default::default()
    }
}

/// Writes a small dataset directory with the CLI generator.
pub fn write_dataset(dir: &Path, episodes_per_task: usize, seed: u64) {
    let cfg = RunConfig {
        out: dir.to_path_buf(),
        episodes_per_task,
        seed,
        ..Default::default()
    };
    wm_distill::experiment::cmd_gen_data(&cfg).unwrap();
}

/// Chi-square upper-tail test at level `alpha` via the Wilson–Hilferty
/// normal approximation. Returns whether `stat` is *not* rejected.
pub fn chi2_accepts(stat: f64, df: f64, z_alpha: f64) -> bool {
    let h = 2.0 / (9.0 * df);
    let z = ((stat / df).powf(1.0 / 3.0) - (1.0 - h)) / h.sqrt();
    z < z_alpha
}

/// One-sided upper 1% point of the standard normal.
pub const Z_01: f64 = 2.326_347_874;
