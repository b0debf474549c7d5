mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use wm_distill::checkpoint::{Checkpoint, TensorRecord};
use wm_distill::dataset::Episode;
use wm_distill::distill::{reward_distill_loss, total_distill_loss, FrozenTeacher};
use wm_distill::envs::{Env, EnvState, Task};
use wm_distill::experiment::sweep::{sort_results, CellResult};
use wm_distill::experiment::normalized_score;
use wm_distill::f16::{f16_to_f32, f32_to_f16, F16_MAX, F16_MIN_SUBNORMAL};
use wm_distill::params::ParamStore;
use wm_distill::pca::fit_pca;
use wm_distill::planner::{elite_weights, plan, Candidates, PlannerConfig};
use wm_distill::quant::{dequantize, to_fp16};
use wm_distill::rng::Rng;
use wm_distill::tensor::{Activation, Graph, Tensor, Var};
use wm_distill::world_model::{LossBreakdown, LossCoeffs, Preset};

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Matmul,
    Linear,
    Add,
    Sub,
    Mul,
    Scale,
    Neg,
    Tanh,
    Mish,
    Square,
    Sum,
    Mean,
    Mse,
    Concat,
}

const OPS: [Op; 14] = [
    Op::Matmul,
    Op::Linear,
    Op::Add,
    Op::Sub,
    Op::Mul,
    Op::Scale,
    Op::Neg,
    Op::Tanh,
    Op::Mish,
    Op::Square,
    Op::Sum,
    Op::Mean,
    Op::Mse,
    Op::Concat,
];

/// Builds `sum(op(a, b, c) ⊙ w)` with `a: m×k`, `b: k×n` or `m×k`, `c: n`.
fn op_loss(op: Op, g: &mut Graph<f64>, a: Var, b: Var, b_same: Var, c: Var, w: &Tensor<f64>) -> Var {
    let out = match op {
        Op::Matmul => g.matmul(a, b).unwrap(),
        Op::Linear => g.linear(a, b, c).unwrap(),
        Op::Add => g.add(a, b_same).unwrap(),
        Op::Sub => g.sub(a, b_same).unwrap(),
        Op::Mul => g.mul(a, b_same).unwrap(),
        Op::Scale => g.scale(a, -1.7),
        Op::Neg => g.neg(a),
        Op::Tanh => g.tanh(a),
        Op::Mish => g.mish(a),
        Op::Square => g.square(a),
        Op::Sum => g.sum(a),
        Op::Mean => g.mean(a),
        Op::Mse => g.mse(a, b_same).unwrap(),
        Op::Concat => g.concat_cols(&[a, b_same]).unwrap(),
    };
    let shape = g.value(out).shape().to_vec();
    let numel: usize = shape.iter().product();
    let wt = g.constant(Tensor::new(shape, w.data()[..numel].to_vec()).unwrap()).unwrap();
    let prod = g.mul(out, wt).unwrap();
    g.sum(prod)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn op_gradients_match_finite_differences(
        m in 1usize..4, k in 1usize..4, n in 1usize..4,
        data in vals(64), weights in vals(64), op_idx in 0usize..OPS.len(),
    ) {
        let op = OPS[op_idx];
        let mut store = ParamStore::<f64>::new();
        let take = |off: usize, len: usize| data[off..off + len].to_vec();
        let a = store.add("a", Tensor::new(vec![m, k], take(0, m * k)).unwrap(), true);
        let b = store.add("b", Tensor::new(vec![k, n], take(16, k * n)).unwrap(), true);
        let bs = store.add("bs", Tensor::new(vec![m, k], take(32, m * k)).unwrap(), true);
        let c = store.add("c", Tensor::new(vec![n], take(48, n)).unwrap(), true);
        let w = Tensor::new(vec![64], weights.clone()).unwrap();
        let eval = |store: &ParamStore<f64>| {
            let mut g = Graph::new();
            let vars = [a, b, bs, c].map(|id| g.param(store, id));
            let loss = op_loss(op, &mut g, vars[0], vars[1], vars[2], vars[3], &w);
            (g, loss)
        };
        let (g, loss) = eval(&store);
        let grads = g.backward(loss).unwrap();
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        let mut probe = store.clone();
        // the mse target is a stop-gradient input
        let params: Vec<_> = [a, b, bs, c].into_iter().filter(|&id| !matches!(op, Op::Mse) || id != bs).collect();
        for id in params {
            let an: Vec<f64> = grads.get(store.key(id)).map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; store.value(id).numel()]);
            for (j, &aj) in an.iter().enumerate() {
                let orig = probe.value(id).data()[j];
                probe.value_mut(id).data_mut()[j] = orig + FD_EPS;
                let (g1, l1) = eval(&probe);
                probe.value_mut(id).data_mut()[j] = orig - FD_EPS;
                let (g2, l2) = eval(&probe);
                probe.value_mut(id).data_mut()[j] = orig;
                let num = (g1.item(l1).unwrap() - g2.item(l2).unwrap()) / (2.0 * FD_EPS);
                diff += (aj - num).powi(2);
                na += aj * aj;
                nn += num * num;
            }
        }
        let denom = na.sqrt().max(nn.sqrt());
        if denom > 1e-6 {
            prop_assert!(diff.sqrt() / denom < 1e-4, "{op:?}: {}", diff.sqrt() / denom);
        }
    }

    #[test]
    fn graph_evaluation_is_deterministic(data in vals(12)) {
        let run = || {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::new(vec![3, 4], data.clone()).unwrap()).unwrap();
            let t = g.mish(x);
            let s = g.square(t);
            let m = g.mean(s);
            g.item(m).unwrap().to_bits()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn mse_is_nonnegative_and_zero_on_itself(a in vals(8), b in vals(8)) {
        let mut g = Graph::<f64>::new();
        let va = g.constant(Tensor::new(vec![2, 4], a).unwrap()).unwrap();
        let vb = g.constant(Tensor::new(vec![2, 4], b).unwrap()).unwrap();
        let l = g.mse(va, vb).unwrap();
        prop_assert!(g.item(l).unwrap() >= 0.0);
        let z = g.mse(va, va).unwrap();
        prop_assert_eq!(g.item(z).unwrap(), 0.0);
    }

    #[test]
    fn total_is_weighted_sum_and_alphas_scale_exactly(
        ac in 0.0f64..2.0, ar in 0.0f64..2.0, av in 0.0f64..2.0, c in 0.1f64..5.0, seed in 0u64..1000,
    ) {
        let ds = random_dataset(1, 12, seed);
        let m = model::<f32>(Preset::micro(), Activation::Tanh, seed);
        let coeffs = LossCoeffs { alpha_consistency: ac, alpha_reward: ar, alpha_value: av, ..Default::default() };
        let batch = ds.sample_batch(4, 3, &mut Rng::seed_from_u64(seed)).unwrap();
        let (b1, lg) = m.original_loss(&batch, &coeffs).unwrap();
        let graph_total = lg.graph.item(lg.total).unwrap() as f64;
        prop_assert!((b1.total - (ac * b1.consistency + ar * b1.reward + av * b1.value)).abs() <= 1e-6);
        prop_assert!((graph_total - b1.total).abs() <= 1e-6 * (1.0 + b1.total.abs()));
        let scaled = LossCoeffs { alpha_reward: ar * c, ..coeffs };
        let (b2, _) = m.original_loss(&batch, &scaled).unwrap();
        prop_assert_eq!((b2.consistency, b2.reward, b2.value), (b1.consistency, b1.reward, b1.value));
        let contribution = |b: &LossBreakdown, k: &LossCoeffs| k.alpha_reward * b.reward;
        prop_assert!((contribution(&b2, &scaled) - c * contribution(&b1, &coeffs)).abs() <= 1e-12 * (1.0 + b1.reward));
    }

    #[test]
    fn total_increases_with_d_coef(orig in 0.0f64..10.0, distill in 1e-3f64..10.0, d1 in 0.0f64..1.0, dd in 1e-3f64..1.0) {
        let o = LossBreakdown { total: orig, ..Default::default() };
        prop_assert!(total_distill_loss(&o, distill, d1 + dd).total > total_distill_loss(&o, distill, d1).total);
    }

    #[test]
    fn reward_distillation_is_nonnegative_and_zero_on_agreement(seed in 0u64..500) {
        let ds = random_dataset(1, 10, seed);
        let batch = ds.sample_batch(4, 3, &mut Rng::seed_from_u64(seed)).unwrap();
        let mut t = model::<f64>(Preset::micro(), Activation::Tanh, seed);
        jitter(&mut t, 0.3, seed);
        let teacher = FrozenTeacher::new(t.clone());
        let mut other = model::<f64>(Preset::micro(), Activation::Tanh, seed + 1);
        jitter(&mut other, 0.3, seed + 1);
        prop_assert!(reward_distill_loss(&teacher, &other, &batch, 3).unwrap() > 0.0);
        prop_assert_eq!(reward_distill_loss(&teacher, &t, &batch, 3).unwrap(), 0.0);
    }

    #[test]
    fn pca_rows_orthonormal_and_variance_sorted(seed in 0u64..1000, dim in 2usize..7) {
        let mut rng = Rng::seed_from_u64(seed);
        let rows = 300;
        let data: Vec<f64> = (0..rows * dim)
            .map(|i| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng) * (1.0 + (i % dim) as f64))
            .collect();
        let p = fit_pca(&data, rows, dim, dim, &mut rng).unwrap();
        for i in 0..dim {
            for j in 0..dim {
                let d: f64 = p.components[i].iter().zip(&p.components[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((d - want).abs() < 1e-5, "{} {} {}", i, j, d);
            }
        }
        for w in p.explained.windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-9);
        }
    }

    #[test]
    fn planner_actions_stay_in_bounds(seed in 0u64..1000, obs in vals(8), temp in 0.01f64..5.0, max_std in 0.1f64..4.0) {
        let m = model::<f32>(Preset::micro(), Activation::Tanh, seed);
        let obs32: Vec<f32> = obs.iter().map(|&x| x as f32 * 3.0).collect();
        let z = m.encode(&obs32, 1).unwrap();
        let cfg = PlannerConfig { temperature: temp, max_std, num_samples: 32, num_elites: 4, ..Default::default() };
        let a = plan(&m, &z, &cfg, &mut Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn lowering_temperature_keeps_the_top_elite(seed in 0u64..1000, t_hi in 0.1f64..10.0, ratio in 0.01f64..1.0) {
        use rand::Rng as _;
        let mut rng = Rng::seed_from_u64(seed);
        let actions: Vec<Vec<f64>> = (0..16).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let scores: Vec<f64> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = Candidates { actions, scores };
        let top = |t: f64| {
            let cfg = PlannerConfig { temperature: t, num_elites: 16, num_samples: 16, ..Default::default() };
            elite_weights(&c, &cfg)
                .into_iter()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .unwrap()
        };
        let (i1, w1) = top(t_hi);
        let (i2, w2) = top(t_hi * ratio);
        let best = (0..16).max_by(|&a, &b| c.scores[a].total_cmp(&c.scores[b])).unwrap();
        prop_assert_eq!(i1, best);
        prop_assert_eq!(i2, best);
        prop_assert!(w2 >= w1 - 1e-15);
    }

    #[test]
    fn env_steps_are_deterministic_with_unit_rewards(task_idx in 0usize..3, seed in 0u64..10_000, actions in prop::collection::vec(-3.0f32..3.0, 1..40)) {
        let env = Env::new(Task::ALL[task_idx]);
        let (mut s, _) = env.reset(seed);
        for a in actions {
            let x = env.step(&s, &[a]).unwrap();
            let y = env.step(&s, &[a]).unwrap();
            prop_assert_eq!(x.state, y.state);
            prop_assert_eq!(x.reward.to_bits(), y.reward.to_bits());
            prop_assert!((0.0..=1.0).contains(&x.reward));
            s = x.state;
        }
    }

    #[test]
    fn undamped_pendulum_energy_drift_is_bounded(theta0 in 0.3f64..2.8, omega0 in -1.0f64..1.0) {
        let mut env = Env::new(Task::PendulumSwingup);
        env.pendulum.damping = 0.0;
        let p = env.pendulum;
        let mut s = EnvState::Pendulum { theta: theta0, omega: omega0, t: 0 };
        let e0 = p.energy(theta0, omega0);
        let mut prev = e0;
        for _ in 0..100 {
            s = env.step(&s, &[0.0]).unwrap().state;
            let EnvState::Pendulum { theta, omega, .. } = s else { unreachable!() };
            let e = p.energy(theta, omega);
            prop_assert!((e - prev).abs() / e0 < 0.05);
            prev = e;
        }
    }

    #[test]
    fn cup_reward_stays_one_once_caught(seed in 0u64..10_000, actions in prop::collection::vec(-1.0f32..1.0, 200)) {
        let env = Env::new(Task::CupCatch);
        let (mut s, _) = env.reset(seed);
        let mut caught = false;
        for a in actions {
            let a = if caught { a } else { env.scripted_action(&s) };
            let st = env.step(&s, &[a]).unwrap();
            if caught {
                prop_assert_eq!(st.reward, 1.0);
            }
            caught |= matches!(st.state, EnvState::Cup { caught: true, .. });
            s = st.state;
        }
    }

    #[test]
    fn episodes_round_trip_bit_exactly(task_idx in 0usize..3, len in 1usize..30, seed in 0u64..1000) {
        use rand::Rng as _;
        let task = Task::ALL[task_idx];
        let mut rng = Rng::seed_from_u64(seed);
        let od = task.obs_dim();
        let ep = Episode {
            task,
            obs_dim: od,
            act_dim: 1,
            obs: (0..(len + 1) * od).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect(),
            actions: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            rewards: (0..len).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let bytes = ep.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), ep.encoded_len());
        let back = Episode::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn sampled_windows_stay_inside_one_episode(seed in 0u64..1000, h in 1usize..6, b in 1usize..16) {
        let ds = random_dataset(2, 8, seed);
        let batch = ds.sample_batch(b, h, &mut Rng::seed_from_u64(seed)).unwrap();
        let od = ds.obs_dim();
        for (row, &(ep, start)) in batch.sources.iter().enumerate() {
            prop_assert!(start + h <= ds.episodes[ep].len());
            for t in 0..=h {
                let got = &batch.obs_at(t)[row * od..(row + 1) * od];
                let want = &ds.model_obs(ep)[(start + t) * od..(start + t + 1) * od];
                prop_assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn f16_round_trip_error_is_bounded(x in prop_oneof![-65504.0f32..65504.0, -1e-3f32..1e-3, -1e-6f32..1e-6]) {
        let n = f32_to_f16(x).unwrap();
        let err = (f16_to_f32(n.bits) as f64 - x as f64).abs();
        let bound = (x.abs() as f64 * 2f64.powi(-11)).max(F16_MIN_SUBNORMAL as f64);
        prop_assert!(err <= bound, "{x}: {err} > {bound}");
        prop_assert!(x.abs() <= F16_MAX || n.clamped);
    }

    #[test]
    fn quantization_is_idempotent_and_shrinks(data in prop::collection::vec(-70000.0f32..70000.0, 1..64)) {
        let mut ck = Checkpoint::new();
        ck.tensors.push(TensorRecord::f32("w", vec![data.len()], data));
        let (q, r) = to_fp16(&ck).unwrap();
        prop_assert!(r.bytes_after < r.bytes_before);
        let (q2, _) = to_fp16(&dequantize(&q)).unwrap();
        prop_assert_eq!(q2.to_bytes().unwrap(), q.to_bytes().unwrap());
    }

    #[test]
    fn normalized_score_is_mean_over_ten(scores in prop::collection::vec(0.0f64..=1000.0, 1..10)) {
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        prop_assert_eq!(normalized_score(&scores).unwrap(), mean / 10.0);
    }

    #[test]
    fn sweep_order_ignores_input_order(scores in prop::collection::vec(prop::option::of(0u8..4), 1..12), seed in 0u64..100) {
        use rand::seq::SliceRandom;
        let cells: Vec<CellResult> = scores.iter().enumerate().map(|(i, s)| CellResult {
            cell: format!("cell_{i:03}"),
            config: format!("d_coef=0.{i}"),
            score: s.map(f64::from),
            error: s.is_none().then(|| "failed".into()),
        }).collect();
        let mut a = cells.clone();
        let mut b = cells;
        b.shuffle(&mut Rng::seed_from_u64(seed));
        sort_results(&mut a);
        sort_results(&mut b);
        prop_assert_eq!(a, b);
    }
}
