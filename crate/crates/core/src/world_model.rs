//! Latent world model (encoder, dynamics, reward, Q, target Q, policy) and
//! its composite consistency/reward/value loss.

use crate::dataset::TransitionBatch;
use crate::error::{Error, Result};
use crate::nn::{concat_rows, Mlp};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Activation, Graph, Real, Tensor, Var};

/// Width configuration of a [`WorldModel`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Preset {
    pub name: String,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
}

impl Preset {
    pub const NAMES: [&'static str; 4] = ["teacher-L", "teacher-S", "student", "micro"];

    pub fn new(name: &str, latent_dim: usize, hidden_dim: usize, hidden_layers: usize) -> Self {
        Self {
            name: name.to_string(),
            latent_dim,
            hidden_dim,
            hidden_layers,
        }
    }

    pub fn teacher_l() -> Self {
        Self::new("teacher-L", 64, 256, 2)
    }

    pub fn teacher_s() -> Self {
        Self::new("teacher-S", 32, 128, 2)
    }

    pub fn student() -> Self {
        Self::new("student", 16, 64, 2)
    }

    /// Two-dimensional latent used by gradient checks.
    pub fn micro() -> Self {
        Self::new("micro", 2, 4, 1)
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "teacher-L" => Ok(Self::teacher_l()),
            "teacher-S" => Ok(Self::teacher_s()),
            "student" => Ok(Self::student()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected one of {:?})",
                Self::NAMES
            ))),
        }
    }

    fn dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(std::iter::repeat_n(self.hidden_dim, self.hidden_layers));
        d.push(output);
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoeffs {
    pub alpha_consistency: f64,
    pub alpha_reward: f64,
    pub alpha_value: f64,
    pub rho: f64,
    pub horizon: usize,
    pub gamma: f64,
}

impl Default for LossCoeffs {
    fn default() -> Self {
        Self {
            alpha_consistency: 1.0,
            alpha_reward: 1.0,
            alpha_value: 0.5,
            rho: 0.5,
            horizon: 3,
            gamma: 0.99,
        }
    }
}

impl LossCoeffs {
    pub fn validate(&self) -> Result<()> {
        let alphas = [self.alpha_consistency, self.alpha_reward, self.alpha_value];
        if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Config(format!("loss coefficients must be >= 0, got {alphas:?}")));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }

    /// `α_c·c + α_r·r + α_v·v` in f64.
    pub fn combine(&self, consistency: f64, reward: f64, value: f64) -> f64 {
        self.alpha_consistency * consistency + self.alpha_reward * reward + self.alpha_value * value
    }
}

/// Optimizer-side settings of a training loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub adam: AdamConfig,
    /// Soft-update rate of the target Q head.
    pub tau: f64,
    /// Max joint gradient norm per parameter group; `<= 0` disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            tau: 0.01,
            grad_clip: 20.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub consistency: f64,
    pub reward: f64,
    pub value: f64,
    pub distill: f64,
    pub total: f64,
}

/// A composite loss graph ready for backprop.
pub struct LossGraph<F: Real> {
    pub graph: Graph<F>,
    pub consistency: Var,
    pub reward: Var,
    pub value: Var,
    pub total: Var,
    /// Detached rollout latents ẑ_0..ẑ_H, each `B × latent_dim`.
    pub latents: Vec<Vec<F>>,
    pub batch_size: usize,
}

/// Constant regression targets of the composite loss, one entry per step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets<F> {
    pub encoded: Vec<Vec<F>>,
    pub td: Vec<Vec<F>>,
}

/// Adam states for the model group and the policy group.
#[derive(Clone, Debug)]
pub struct TrainOptim<F: Real = f32> {
    pub model: Adam<F>,
    pub policy: Adam<F>,
}

impl<F: Real> TrainOptim<F> {
    /// `extra` joins the model group (e.g. a trainable latent projection).
    pub fn new(model: &WorldModel<F>, adam: AdamConfig, extra: &[ParamId]) -> Self {
        let mut group = model.model_params();
        group.extend_from_slice(extra);
        Self {
            model: Adam::new(adam, &model.store, group),
            policy: Adam::new(adam, &model.store, model.policy_params()),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.model.step_count()
    }
}

#[derive(Clone, Debug)]
pub struct WorldModel<F: Real = f32> {
    pub preset: Preset,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub activation: Activation,
    pub store: ParamStore<F>,
    pub encoder: Mlp,
    pub dynamics: Mlp,
    pub reward: Mlp,
    pub q: Mlp,
    pub q_target: Mlp,
    pub policy: Mlp,
}

const HEADS: [&str; 6] = ["encoder", "dynamics", "reward", "q", "q_target", "policy"];

impl<F: Real> WorldModel<F> {
    /// Fresh model. Reward and Q output layers start at zero; the target Q
    /// head is an untrainable copy of Q.
    pub fn new(preset: Preset, obs_dim: usize, act_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let (l, a) = (preset.latent_dim, act_dim);
        let tanh = Some(Activation::Tanh);
        let encoder = Mlp::build(&mut store, "encoder", &preset.dims(obs_dim, l), activation, tanh, true, false, rng);
        let dynamics = Mlp::build(&mut store, "dynamics", &preset.dims(l + a, l), activation, tanh, true, false, rng);
        let reward = Mlp::build(&mut store, "reward", &preset.dims(l + a, 1), activation, None, true, true, rng);
        let q = Mlp::build(&mut store, "q", &preset.dims(l + a, 1), activation, None, true, true, rng);
        let q_target = Mlp::build(&mut store, "q_target", &preset.dims(l + a, 1), activation, None, false, true, rng);
        let policy = Mlp::build(&mut store, "policy", &preset.dims(l, a), activation, tanh, true, false, rng);
        let mut m = Self {
            preset,
            obs_dim,
            act_dim,
            activation,
            store,
            encoder,
            dynamics,
            reward,
            q,
            q_target,
            policy,
        };
        m.soft_update(1.0);
        m
    }

    /// Rebinds the architecture to an existing store (e.g. loaded from disk).
    pub fn from_store(
        preset: Preset,
        obs_dim: usize,
        act_dim: usize,
        activation: Activation,
        store: ParamStore<F>,
    ) -> Result<Self> {
        let (l, a) = (preset.latent_dim, act_dim);
        let tanh = Some(Activation::Tanh);
        let encoder = Mlp::bind(&store, "encoder", &preset.dims(obs_dim, l), activation, tanh)?;
        let dynamics = Mlp::bind(&store, "dynamics", &preset.dims(l + a, l), activation, tanh)?;
        let reward = Mlp::bind(&store, "reward", &preset.dims(l + a, 1), activation, None)?;
        let q = Mlp::bind(&store, "q", &preset.dims(l + a, 1), activation, None)?;
        let q_target = Mlp::bind(&store, "q_target", &preset.dims(l + a, 1), activation, None)?;
        let policy = Mlp::bind(&store, "policy", &preset.dims(l, a), activation, tanh)?;
        let mut store = store;
        for id in q_target.param_ids() {
            store.set_trainable(id, false);
        }
        Ok(Self {
            preset,
            obs_dim,
            act_dim,
            activation,
            store,
            encoder,
            dynamics,
            reward,
            q,
            q_target,
            policy,
        })
    }

    /// Same model at another precision; parameter ids are preserved.
    pub fn cast<G: Real>(&self) -> WorldModel<G> {
        WorldModel {
            preset: self.preset.clone(),
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            activation: self.activation,
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            dynamics: self.dynamics.clone(),
            reward: self.reward.clone(),
            q: self.q.clone(),
            q_target: self.q_target.clone(),
            policy: self.policy.clone(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.preset.latent_dim
    }

    pub fn heads(&self) -> [(&'static str, &Mlp); 6] {
        [
            (HEADS[0], &self.encoder),
            (HEADS[1], &self.dynamics),
            (HEADS[2], &self.reward),
            (HEADS[3], &self.q),
            (HEADS[4], &self.q_target),
            (HEADS[5], &self.policy),
        ]
    }

    /// Parameters optimized by the composite loss.
    pub fn model_params(&self) -> Vec<ParamId> {
        [&self.encoder, &self.dynamics, &self.reward, &self.q]
            .iter()
            .flat_map(|m| m.param_ids())
            .collect()
    }

    pub fn policy_params(&self) -> Vec<ParamId> {
        self.policy.param_ids().collect()
    }

    /// Number of values in the trainable heads (the target copy excluded).
    pub fn num_params(&self) -> usize {
        self.model_params()
            .into_iter()
            .chain(self.policy_params())
            .map(|id| self.store.value(id).numel())
            .sum()
    }

    /// Zeroes the final layer of one head.
    pub fn zero_output_layer(&mut self, head: &str) -> Result<()> {
        let mlp = match head {
            "encoder" => &self.encoder,
            "dynamics" => &self.dynamics,
            "reward" => &self.reward,
            "q" => &self.q,
            "q_target" => &self.q_target,
            "policy" => &self.policy,
            other => return Err(Error::Invalid(format!("unknown head {other:?}"))),
        };
        let &(w, b) = mlp.layers().last().unwrap();
        for id in [w, b] {
            self.store.value_mut(id).data_mut().fill(F::zero());
        }
        Ok(())
    }

    /// Marks every parameter untrainable.
    pub fn freeze(&mut self) {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            self.store.set_trainable(id, false);
        }
    }

    /// `target ← (1−τ)·target + τ·q`.
    pub fn soft_update(&mut self, tau: f64) {
        if tau == 0.0 {
            return;
        }
        let (t, keep) = (F::of(tau), F::of(1.0 - tau));
        let pairs: Vec<(ParamId, ParamId)> = self
            .q
            .param_ids()
            .zip(self.q_target.param_ids())
            .collect();
        for (src, dst) in pairs {
            let s = self.store.value(src).data().to_vec();
            for (d, s) in self.store.value_mut(dst).data_mut().iter_mut().zip(s) {
                *d = if tau == 1.0 { s } else { keep * *d + t * s };
            }
        }
    }

    fn check_cols(&self, op: &'static str, x: &[F], rows: usize, cols: usize) -> Result<()> {
        if x.len() != rows * cols {
            return Err(Error::shape(op, &[rows, cols], &[x.len()]));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{op} input")));
        }
        Ok(())
    }

    pub fn encode(&self, obs: &[F], rows: usize) -> Result<Vec<F>> {
        self.check_cols("encode", obs, rows, self.obs_dim)?;
        Ok(self.encode_rows(obs, rows))
    }

    pub fn dynamics_step(&self, z: &[F], a: &[F], rows: usize) -> Result<Vec<F>> {
        self.check_cols("dynamics latent", z, rows, self.latent_dim())?;
        self.check_cols("dynamics action", a, rows, self.act_dim)?;
        Ok(self.dynamics_rows(z, a, rows))
    }

    pub fn predict_reward(&self, z: &[F], a: &[F], rows: usize) -> Result<Vec<F>> {
        self.check_cols("reward latent", z, rows, self.latent_dim())?;
        self.check_cols("reward action", a, rows, self.act_dim)?;
        Ok(self.reward_rows(z, a, rows))
    }

    /// Unchecked inference helpers over packed rows.
    pub fn encode_rows(&self, obs: &[F], rows: usize) -> Vec<F> {
        self.encoder.infer(&self.store, obs, rows)
    }

    pub fn dynamics_rows(&self, z: &[F], a: &[F], rows: usize) -> Vec<F> {
        let za = concat_rows(z, self.latent_dim(), a, self.act_dim);
        self.dynamics.infer(&self.store, &za, rows)
    }

    pub fn reward_rows(&self, z: &[F], a: &[F], rows: usize) -> Vec<F> {
        let za = concat_rows(z, self.latent_dim(), a, self.act_dim);
        self.reward.infer(&self.store, &za, rows)
    }

    pub fn q_rows(&self, z: &[F], a: &[F], rows: usize) -> Vec<F> {
        let za = concat_rows(z, self.latent_dim(), a, self.act_dim);
        self.q.infer(&self.store, &za, rows)
    }

    pub fn q_target_rows(&self, z: &[F], a: &[F], rows: usize) -> Vec<F> {
        let za = concat_rows(z, self.latent_dim(), a, self.act_dim);
        self.q_target.infer(&self.store, &za, rows)
    }

    pub fn policy_rows(&self, z: &[F], rows: usize) -> Vec<F> {
        self.policy.infer(&self.store, z, rows)
    }

    /// Batch columns at offset `t` converted to `F`.
    fn batch_obs(batch: &TransitionBatch, t: usize) -> Vec<F> {
        batch.obs_at(t).into_iter().map(|x| F::of(x as f64)).collect()
    }

    fn batch_actions(batch: &TransitionBatch, t: usize) -> Vec<F> {
        batch.actions_at(t).into_iter().map(|x| F::of(x as f64)).collect()
    }

    fn check_batch(&self, batch: &TransitionBatch, coeffs: &LossCoeffs) -> Result<()> {
        coeffs.validate()?;
        let h = coeffs.horizon;
        if batch.horizon < h {
            return Err(Error::Invalid(format!(
                "loss horizon {h} longer than batch window {}",
                batch.horizon
            )));
        }
        if batch.obs_dim != self.obs_dim || batch.act_dim != self.act_dim {
            return Err(Error::shape(
                "batch dims",
                &[self.obs_dim, self.act_dim],
                &[batch.obs_dim, batch.act_dim],
            ));
        }
        Ok(())
    }

    /// Encoder latents of obs_1..obs_H and TD targets `r + γ·Q_target(z', π(z'))`.
    pub fn loss_targets(&self, batch: &TransitionBatch, coeffs: &LossCoeffs) -> Result<LossTargets<F>> {
        self.check_batch(batch, coeffs)?;
        let b = batch.batch_size;
        let mut encoded = Vec::with_capacity(coeffs.horizon);
        let mut td = Vec::with_capacity(coeffs.horizon);
        for t in 0..coeffs.horizon {
            let z_next = self.encode_rows(&Self::batch_obs(batch, t + 1), b);
            let a_next = self.policy_rows(&z_next, b);
            let q_next = self.q_target_rows(&z_next, &a_next, b);
            let gamma = F::of(coeffs.gamma);
            td.push(
                batch
                    .rewards_at(t)
                    .into_iter()
                    .zip(q_next)
                    .map(|(r, q)| F::of(r as f64) + gamma * q)
                    .collect(),
            );
            encoded.push(z_next);
        }
        Ok(LossTargets { encoded, td })
    }

    /// Builds the composite loss on the first `coeffs.horizon` steps of each
    /// window. Encoder targets and TD targets are constants.
    pub fn original_loss(&self, batch: &TransitionBatch, coeffs: &LossCoeffs) -> Result<(LossBreakdown, LossGraph<F>)> {
        let targets = self.loss_targets(batch, coeffs)?;
        self.original_loss_with_targets(batch, coeffs, targets)
    }

    /// The composite loss against given targets.
    pub fn original_loss_with_targets(
        &self,
        batch: &TransitionBatch,
        coeffs: &LossCoeffs,
        targets: LossTargets<F>,
    ) -> Result<(LossBreakdown, LossGraph<F>)> {
        self.check_batch(batch, coeffs)?;
        let h = coeffs.horizon;
        let b = batch.batch_size;
        let l = self.latent_dim();
        let LossTargets {
            encoded: mut enc_targets,
            td: mut td_targets,
        } = targets;
        if enc_targets.len() != h || td_targets.len() != h {
            return Err(Error::shape("loss targets", &[h, h], &[enc_targets.len(), td_targets.len()]));
        }
        let mut g = Graph::new();

        let obs0 = g.constant(Tensor::matrix(b, self.obs_dim, Self::batch_obs(batch, 0))?)?;
        let mut z = self.encoder.forward(&mut g, &self.store, obs0, false)?;
        let mut latents = vec![g.value(z).data().to_vec()];
        let (mut cons, mut rew, mut val): (Option<Var>, Option<Var>, Option<Var>) = (None, None, None);
        let accumulate = |g: &mut Graph<F>, acc: Option<Var>, term: Var| -> Result<Var> {
            match acc {
                None => Ok(term),
                Some(a) => g.add(a, term),
            }
        };
        for t in 0..h {
            let w = coeffs.rho.powi(t as i32);
            let a = g.constant(Tensor::matrix(b, self.act_dim, Self::batch_actions(batch, t))?)?;
            let za = g.concat_cols(&[z, a])?;

            let r_pred = self.reward.forward(&mut g, &self.store, za, false)?;
            let r_true = g.constant(Tensor::matrix(
                b,
                1,
                batch.rewards_at(t).into_iter().map(|x| F::of(x as f64)).collect(),
            )?)?;
            let r_loss = g.mse(r_pred, r_true)?;
            let r_loss = g.scale(r_loss, w);
            rew = Some(accumulate(&mut g, rew, r_loss)?);

            let q_pred = self.q.forward(&mut g, &self.store, za, false)?;
            let td = g.constant(Tensor::matrix(b, 1, std::mem::take(&mut td_targets[t]))?)?;
            let v_loss = g.mse(q_pred, td)?;
            let v_loss = g.scale(v_loss, w);
            val = Some(accumulate(&mut g, val, v_loss)?);

            z = self.dynamics.forward(&mut g, &self.store, za, false)?;
            latents.push(g.value(z).data().to_vec());
            let target = g.constant(Tensor::matrix(b, l, std::mem::take(&mut enc_targets[t]))?)?;
            let c_loss = g.mse(z, target)?;
            let c_loss = g.scale(c_loss, coeffs.rho.powi(t as i32 + 1));
            cons = Some(accumulate(&mut g, cons, c_loss)?);
        }
        let (cons, rew, val) = (cons.unwrap(), rew.unwrap(), val.unwrap());
        let tc = g.scale(cons, coeffs.alpha_consistency);
        let tr = g.scale(rew, coeffs.alpha_reward);
        let tv = g.scale(val, coeffs.alpha_value);
        let total = g.add(tc, tr)?;
        let total = g.add(total, tv)?;

        let (c, r, v) = (
            g.item(cons)?.as_f64(),
            g.item(rew)?.as_f64(),
            g.item(val)?.as_f64(),
        );
        for (name, x) in [("consistency", c), ("reward", r), ("value", v)] {
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss")));
            }
        }
        let breakdown = LossBreakdown {
            step: 0,
            consistency: c,
            reward: r,
            value: v,
            distill: 0.0,
            total: coeffs.combine(c, r, v),
        };
        Ok((
            breakdown,
            LossGraph {
                graph: g,
                consistency: cons,
                reward: rew,
                value: val,
                total,
                latents,
                batch_size: b,
            },
        ))
    }

    /// `−mean Q(ẑ, π(ẑ))` over detached latents; only the policy is tracked.
    pub fn policy_loss(&self, latents: &[Vec<F>], rows_each: usize) -> Result<(f64, Graph<F>, Var)> {
        let l = self.latent_dim();
        let all: Vec<F> = latents.concat();
        let rows = rows_each * latents.len();
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(rows, l, all)?)?;
        let a = self.policy.forward(&mut g, &self.store, z, false)?;
        let za = g.concat_cols(&[z, a])?;
        let q = self.q.forward(&mut g, &self.store, za, true)?;
        let m = g.mean(q);
        let loss = g.neg(m);
        let value = g.item(loss)?.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite("policy loss".into()));
        }
        Ok((value, g, loss))
    }

    /// Backprop of `loss` into the model group, clip, Adam step, then the
    /// policy update on `latents` and the target soft update.
    pub fn apply_update(
        &mut self,
        opt: &mut TrainOptim<F>,
        graph: &Graph<F>,
        loss: Var,
        latents: &[Vec<F>],
        rows_each: usize,
        settings: &TrainSettings,
    ) -> Result<f64> {
        self.store.zero_grad();
        let grads = graph.backward(loss)?;
        self.store.accumulate(&grads);
        if settings.grad_clip > 0.0 {
            clip_grad_norm(&mut self.store, opt.model.params(), settings.grad_clip);
        }
        opt.model.step(&mut self.store)?;
        self.store.zero_grad();

        let (pl, pg, ploss) = self.policy_loss(latents, rows_each)?;
        let grads = pg.backward(ploss)?;
        self.store.accumulate(&grads);
        if settings.grad_clip > 0.0 {
            clip_grad_norm(&mut self.store, opt.policy.params(), settings.grad_clip);
        }
        opt.policy.step(&mut self.store)?;
        self.store.zero_grad();

        self.soft_update(settings.tau);
        Ok(pl)
    }

    /// One from-scratch training step on the composite loss.
    pub fn train_step(
        &mut self,
        opt: &mut TrainOptim<F>,
        batch: &TransitionBatch,
        coeffs: &LossCoeffs,
        settings: &TrainSettings,
    ) -> Result<LossBreakdown> {
        let (mut breakdown, lg) = self.original_loss(batch, coeffs)?;
        self.apply_update(opt, &lg.graph, lg.total, &lg.latents, lg.batch_size, settings)?;
        breakdown.step = opt.step_count();
        Ok(breakdown)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, Episode};
    use crate::envs::{Env, Task, MODEL_OBS_DIM};
    use rand::SeedableRng;

    fn model<F: Real>(preset: Preset, seed: u64) -> WorldModel<F> {
        WorldModel::new(preset, MODEL_OBS_DIM, 1, Activation::Mish, &mut Rng::seed_from_u64(seed))
    }

    fn small_dataset() -> Dataset {
        let mut eps = Vec::new();
        for (i, task) in Task::ALL.into_iter().enumerate() {
            let env = Env::new(task);
            let (mut s, obs) = env.reset(i as u64);
            let mut ep = Episode {
                task,
                obs_dim: task.obs_dim(),
                act_dim: 1,
                obs,
                actions: vec![],
                rewards: vec![],
            };
            for k in 0..40 {
                let a = ((k as f32) * 0.7 + i as f32).sin();
                let st = env.step(&s, &[a]).unwrap();
                ep.actions.push(a);
                ep.rewards.push(st.reward);
                ep.obs.extend_from_slice(&st.obs);
                s = st.state;
            }
            eps.push(ep);
        }
        Dataset::new(eps).unwrap()
    }

    #[test]
    fn presets_shrink_from_teacher_to_student() {
        assert!(Preset::teacher_l().latent_dim > Preset::teacher_s().latent_dim);
        assert!(Preset::teacher_s().latent_dim > Preset::student().latent_dim);
        assert_eq!(Preset::parse("student").unwrap(), Preset::student());
        assert!(Preset::parse("huge").is_err());
    }

    #[test]
    fn zero_output_layers_give_zero_outputs() {
        let mut m = model::<f32>(Preset::student(), 1);
        m.zero_output_layer("encoder").unwrap();
        m.zero_output_layer("dynamics").unwrap();
        let obs: Vec<f32> = (0..2 * MODEL_OBS_DIM).map(|i| i as f32 * 0.1).collect();
        let z = m.encode(&obs, 2).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
        let zn = m.dynamics_step(&z, &[0.3, -0.2], 2).unwrap();
        assert!(zn.iter().all(|&x| x == 0.0));
        // reward head starts at zero
        assert_eq!(m.predict_reward(&z, &[0.3, -0.2], 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn batch_equals_rows_one_at_a_time() {
        let m = model::<f32>(Preset::student(), 2);
        let mut m = m;
        // non-trivial reward head
        let &(w, _) = m.reward.layers().last().unwrap();
        for (i, x) in m.store.value_mut(w).data_mut().iter_mut().enumerate() {
            *x = (i as f32 * 0.37).sin() * 0.1;
        }
        let obs: Vec<f32> = (0..3 * MODEL_OBS_DIM).map(|i| (i as f32 * 0.3).cos()).collect();
        let acts = [0.5f32, -1.0, 0.1];
        let z = m.encode(&obs, 3).unwrap();
        let zn = m.dynamics_step(&z, &acts, 3).unwrap();
        let r = m.predict_reward(&z, &acts, 3).unwrap();
        let l = m.latent_dim();
        for row in 0..3 {
            let zi = m.encode(&obs[row * MODEL_OBS_DIM..(row + 1) * MODEL_OBS_DIM], 1).unwrap();
            assert_eq!(&z[row * l..(row + 1) * l], &zi[..]);
            let zni = m.dynamics_step(&zi, &acts[row..row + 1], 1).unwrap();
            assert_eq!(&zn[row * l..(row + 1) * l], &zni[..]);
            assert_eq!(r[row], m.predict_reward(&zi, &acts[row..row + 1], 1).unwrap()[0]);
        }
        assert_eq!(m.encode(&obs, 3).unwrap(), z);
    }

    #[test]
    fn encode_rejects_bad_input() {
        let m = model::<f32>(Preset::micro(), 0);
        assert!(matches!(m.encode(&[0.0; 7], 1), Err(Error::Shape { .. })));
        let mut obs = [0.0f32; MODEL_OBS_DIM];
        obs[0] = f32::NAN;
        assert!(matches!(m.encode(&obs, 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn policy_outputs_are_bounded() {
        let mut m = model::<f32>(Preset::micro(), 3);
        for id in m.policy_params() {
            for x in m.store.value_mut(id).data_mut() {
                *x *= 100.0;
            }
        }
        let z: Vec<f32> = (0..40).map(|i| (i as f32 - 20.0) * 0.5).collect();
        assert!(m.policy_rows(&z, 20).iter().all(|a| (-1.0..=1.0).contains(a)));
    }

    #[test]
    fn zero_alphas_give_zero_total() {
        let m = model::<f32>(Preset::student(), 4);
        let ds = small_dataset();
        let batch = ds.sample_batch(8, 3, &mut Rng::seed_from_u64(0)).unwrap();
        let coeffs = LossCoeffs {
            alpha_consistency: 0.0,
            alpha_reward: 0.0,
            alpha_value: 0.0,
            ..LossCoeffs::default()
        };
        let (bd, lg) = m.original_loss(&batch, &coeffs).unwrap();
        assert_eq!(bd.total, 0.0);
        assert_eq!(lg.graph.item(lg.total).unwrap(), 0.0);
        assert!(bd.consistency > 0.0 && bd.reward > 0.0);
    }

    #[test]
    fn total_matches_weighted_components() {
        let m = model::<f32>(Preset::student(), 5);
        let ds = small_dataset();
        let batch = ds.sample_batch(8, 3, &mut Rng::seed_from_u64(1)).unwrap();
        let coeffs = LossCoeffs::default();
        let (bd, lg) = m.original_loss(&batch, &coeffs).unwrap();
        let expected = bd.consistency + bd.reward + 0.5 * bd.value;
        assert!((bd.total - expected).abs() < 1e-6);
        assert!((lg.graph.item(lg.total).unwrap() as f64 - bd.total).abs() < 1e-5);
        let doubled = LossCoeffs {
            alpha_reward: 2.0,
            ..coeffs
        };
        let (bd2, _) = m.original_loss(&batch, &doubled).unwrap();
        assert!((bd2.total - bd.total - bd.reward).abs() < 1e-9);
    }

    #[test]
    fn horizon_longer_than_window_fails() {
        let m = model::<f32>(Preset::micro(), 6);
        let ds = small_dataset();
        let batch = ds.sample_batch(2, 2, &mut Rng::seed_from_u64(1)).unwrap();
        assert!(m.original_loss(&batch, &LossCoeffs::default()).is_err());
    }

    #[test]
    fn td_target_carries_no_gradient() {
        let m = model::<f64>(Preset::micro(), 7);
        let ds = small_dataset();
        let batch = ds.sample_batch(4, 3, &mut Rng::seed_from_u64(2)).unwrap();
        let (_, lg) = m.original_loss(&batch, &LossCoeffs::default()).unwrap();
        let grads = lg.graph.backward(lg.total).unwrap();
        let target_keys: Vec<_> = m.q_target.param_ids().map(|id| m.store.key(id)).collect();
        let policy_keys: Vec<_> = m.policy.param_ids().map(|id| m.store.key(id)).collect();
        for key in grads.keys() {
            assert!(!target_keys.contains(&key) && !policy_keys.contains(&key));
        }
        for id in m.model_params() {
            assert!(grads.get(m.store.key(id)).is_some(), "{}", m.store.name(id));
        }
    }

    #[test]
    fn tau_zero_freezes_target_and_training_overfits_one_batch() {
        let mut m = model::<f32>(Preset::student(), 8);
        let ds = small_dataset();
        let batch = ds.sample_batch(16, 3, &mut Rng::seed_from_u64(3)).unwrap();
        let coeffs = LossCoeffs::default();
        let settings = TrainSettings {
            tau: 0.0,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ..TrainSettings::default()
        };
        let target_before: Vec<_> = m.q_target.param_ids().map(|id| m.store.value(id).clone()).collect();
        let mut opt = TrainOptim::new(&m, settings.adam, &[]);
        let first = m.original_loss(&batch, &coeffs).unwrap().0.total;
        for _ in 0..200 {
            m.train_step(&mut opt, &batch, &coeffs, &settings).unwrap();
        }
        let last = m.original_loss(&batch, &coeffs).unwrap().0.total;
        assert!(last < first, "{last} !< {first}");
        let target_after: Vec<_> = m.q_target.param_ids().map(|id| m.store.value(id).clone()).collect();
        assert_eq!(target_before, target_after);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut m = model::<f32>(Preset::micro(), 9);
            let ds = small_dataset();
            let mut rng = Rng::seed_from_u64(4);
            let settings = TrainSettings::default();
            let mut opt = TrainOptim::new(&m, settings.adam, &[]);
            for _ in 0..20 {
                let batch = ds.sample_batch(8, 3, &mut rng).unwrap();
                m.train_step(&mut opt, &batch, &LossCoeffs::default(), &settings).unwrap();
            }
            m.store.content_hash()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn soft_update_interpolates() {
        let mut m = model::<f64>(Preset::micro(), 10);
        let q0 = m.q.layers()[0].0;
        let t0 = m.q_target.layers()[0].0;
        m.store.value_mut(q0).data_mut()[0] = 2.0;
        m.store.value_mut(t0).data_mut()[0] = 1.0;
        m.soft_update(0.25);
        assert_eq!(m.store.value(t0).data()[0], 1.25);
        assert!(!m.store.is_trainable(t0));
    }
}
