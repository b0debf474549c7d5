//! Frozen-teacher reward distillation and the latent-distillation variants.
//!
//! The student objective is
//! `original + d_coef · (reward_distill + latent_coef · latent_distill)`,
//! where the latent term is present only in the latent modes.

use std::path::PathBuf;

use rand::Rng as _;

use crate::dataset::{Dataset, TransitionBatch};
use crate::error::{Error, Result};
use crate::nn::concat_rows;
use crate::params::ParamId;
use crate::pca::{fit_pca, PcaProjection};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::world_model::{LossBreakdown, LossCoeffs, TrainOptim, TrainSettings, WorldModel};

/// Number of teacher latents sampled for the PCA fit.
pub const PCA_SAMPLES: usize = 4096;
pub const PCA_MIN_SAMPLES: usize = 1000;
pub const PROJECTION_PARAM: &str = "distill.projection";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillMode {
    RewardOnly,
    LatentLinear,
    LatentPca,
}

impl DistillMode {
    pub fn name(self) -> &'static str {
        match self {
            DistillMode::RewardOnly => "reward_only",
            DistillMode::LatentLinear => "latent_linear",
            DistillMode::LatentPca => "latent_pca",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reward_only" | "reward" => Ok(DistillMode::RewardOnly),
            "latent_linear" | "linear" => Ok(DistillMode::LatentLinear),
            "latent_pca" | "pca" => Ok(DistillMode::LatentPca),
            other => Err(Error::Config(format!("unknown distillation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub d_coef: f64,
    pub mode: DistillMode,
    pub latent_coef: f64,
    pub teacher_checkpoint: Option<PathBuf>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            d_coef: 0.4,
            mode: DistillMode::RewardOnly,
            latent_coef: 1.0,
            teacher_checkpoint: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_coef.is_finite() && self.d_coef >= 0.0) {
            return Err(Error::Config(format!("d_coef must be >= 0, got {}", self.d_coef)));
        }
        if !(self.latent_coef.is_finite() && self.latent_coef >= 0.0) {
            return Err(Error::Config(format!("latent_coef must be >= 0, got {}", self.latent_coef)));
        }
        Ok(())
    }
}

/// A teacher whose parameters are all untrainable, with the content hash of
/// its parameters taken at construction.
#[derive(Clone, Debug)]
pub struct FrozenTeacher<F: Real = f32> {
    model: WorldModel<F>,
    fingerprint: [u8; 32],
}

impl<F: Real> FrozenTeacher<F> {
    pub fn new(mut model: WorldModel<F>) -> Self {
        model.freeze();
        let fingerprint = model.store.content_hash();
        Self { model, fingerprint }
    }

    pub fn model(&self) -> &WorldModel<F> {
        &self.model
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    /// Recomputes the hash of the current parameters.
    pub fn current_fingerprint(&self) -> [u8; 32] {
        self.model.store.content_hash()
    }
}

/// How teacher latents are mapped into the student latent space.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    None,
    /// Trainable `teacher_dim × student_dim` matrix in the student's store.
    Linear(ParamId),
    Pca(PcaProjection),
}

/// Registers a trainable projection in the student store, U(±1/√Dt) init.
pub fn add_linear_projection<F: Real>(student: &mut WorldModel<F>, teacher_dim: usize, rng: &mut Rng) -> ParamId {
    let ds = student.latent_dim();
    let bound = 1.0 / (teacher_dim as f64).sqrt();
    let data = (0..teacher_dim * ds)
        .map(|_| F::of(rng.random_range(-bound..bound)))
        .collect();
    student.store.add(
        PROJECTION_PARAM,
        Tensor::new(vec![teacher_dim, ds], data).expect("sized"),
        true,
    )
}

/// Samples up to `n` observation rows uniformly over all dataset transitions.
pub fn sample_obs_rows(dataset: &Dataset, n: usize, rng: &mut Rng) -> Result<Vec<f32>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let od = dataset.obs_dim();
    let counts: Vec<usize> = (0..dataset.len()).map(|i| dataset.model_obs(i).len() / od).collect();
    let total: usize = counts.iter().sum();
    let mut out = Vec::with_capacity(n * od);
    for _ in 0..n {
        let mut idx = rng.random_range(0..total);
        let mut ep = 0;
        while idx >= counts[ep] {
            idx -= counts[ep];
            ep += 1;
        }
        out.extend_from_slice(&dataset.model_obs(ep)[idx * od..(idx + 1) * od]);
    }
    Ok(out)
}

/// PCA of teacher latents over `samples` dataset observations.
pub fn fit_teacher_pca<F: Real>(
    teacher: &FrozenTeacher<F>,
    dataset: &Dataset,
    k: usize,
    samples: usize,
    rng: &mut Rng,
) -> Result<PcaProjection> {
    if samples < PCA_MIN_SAMPLES {
        return Err(Error::Pca(format!(
            "need at least {PCA_MIN_SAMPLES} teacher latents, got {samples}"
        )));
    }
    let obs: Vec<F> = sample_obs_rows(dataset, samples, rng)?
        .into_iter()
        .map(|x| F::of(x as f64))
        .collect();
    let z: Vec<f64> = teacher
        .model
        .encode(&obs, samples)?
        .into_iter()
        .map(|x| x.as_f64())
        .collect();
    fit_pca(&z, samples, teacher.model.latent_dim(), k, rng)
}

fn check_compatible<F: Real>(teacher: &WorldModel<F>, student: &WorldModel<F>) -> Result<()> {
    if teacher.obs_dim != student.obs_dim || teacher.act_dim != student.act_dim {
        return Err(Error::shape(
            "teacher/student obs,act dims",
            &[teacher.obs_dim, teacher.act_dim],
            &[student.obs_dim, student.act_dim],
        ));
    }
    Ok(())
}

/// Observations and actions at offsets `0..horizon`, stacked time-major.
fn stacked_inputs<F: Real>(batch: &TransitionBatch, horizon: usize) -> (Vec<F>, Vec<F>, usize) {
    let mut obs = Vec::new();
    let mut act = Vec::new();
    for t in 0..horizon {
        obs.extend(batch.obs_at(t).into_iter().map(|x| F::of(x as f64)));
        act.extend(batch.actions_at(t).into_iter().map(|x| F::of(x as f64)));
    }
    (obs, act, horizon * batch.batch_size)
}

/// Distillation terms added to a student graph.
pub struct DistillTerms {
    pub reward: Var,
    pub latent: Option<Var>,
}

/// Builds `mean (R_teacher − R_student)²` over the first `horizon` steps of
/// each window and, in latent modes, the next-latent matching term. Teacher
/// quantities enter as constants.
pub fn distill_terms<F: Real>(
    g: &mut Graph<F>,
    teacher: &FrozenTeacher<F>,
    student: &WorldModel<F>,
    batch: &TransitionBatch,
    horizon: usize,
    projection: &Projection,
) -> Result<DistillTerms> {
    let tm = &teacher.model;
    check_compatible(tm, student)?;
    if batch.horizon < horizon {
        return Err(Error::Invalid(format!("horizon {horizon} longer than batch window {}", batch.horizon)));
    }
    let (obs, act, rows) = stacked_inputs::<F>(batch, horizon);
    let z_t = tm.encode_rows(&obs, rows);
    let r_t = tm.reward_rows(&z_t, &act, rows);

    let obs_v = g.constant(Tensor::matrix(rows, student.obs_dim, obs)?)?;
    let z_s = student.encoder.forward(g, &student.store, obs_v, false)?;
    let a_v = g.constant(Tensor::matrix(rows, student.act_dim, act.clone())?)?;
    let za = g.concat_cols(&[z_s, a_v])?;
    let r_s = student.reward.forward(g, &student.store, za, false)?;
    let r_t = g.constant(Tensor::matrix(rows, 1, r_t)?)?;
    let reward = g.mse(r_s, r_t)?;

    let latent = match projection {
        Projection::None => None,
        p => {
            let next_t = tm.dynamics_rows(&z_t, &act, rows);
            let next_s = student.dynamics.forward(g, &student.store, za, false)?;
            let target = project_teacher(g, student, next_t, rows, tm.latent_dim(), p)?;
            let ts = g.value(target).shape().to_vec();
            if ts != g.value(next_s).shape() {
                return Err(Error::shape("latent distill projection", &ts, g.value(next_s).shape()));
            }
            let diff = g.sub(next_s, target)?;
            let sq = g.square(diff);
            Some(g.mean(sq))
        }
    };
    Ok(DistillTerms { reward, latent })
}

fn project_teacher<F: Real>(
    g: &mut Graph<F>,
    student: &WorldModel<F>,
    teacher_latents: Vec<F>,
    rows: usize,
    teacher_dim: usize,
    projection: &Projection,
) -> Result<Var> {
    match projection {
        Projection::None => unreachable!(),
        Projection::Linear(id) => {
            let shape = student.store.value(*id).shape();
            if shape[0] != teacher_dim {
                return Err(Error::shape("linear projection", shape, &[teacher_dim]));
            }
            let z = g.constant(Tensor::matrix(rows, teacher_dim, teacher_latents)?)?;
            let p = g.param(&student.store, *id);
            g.matmul(z, p)
        }
        Projection::Pca(pca) => {
            if pca.in_dim() != teacher_dim {
                return Err(Error::shape("pca projection", &[pca.in_dim()], &[teacher_dim]));
            }
            let z: Vec<f64> = teacher_latents.iter().map(|x| x.as_f64()).collect();
            let y: Vec<F> = pca.project(&z, rows).into_iter().map(F::of).collect();
            g.constant(Tensor::matrix(rows, pca.out_dim(), y)?)
        }
    }
}

/// Scalar value of the reward distillation loss on a batch.
pub fn reward_distill_loss<F: Real>(
    teacher: &FrozenTeacher<F>,
    student: &WorldModel<F>,
    batch: &TransitionBatch,
    horizon: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let terms = distill_terms(&mut g, teacher, student, batch, horizon, &Projection::None)?;
    Ok(g.item(terms.reward)?.as_f64())
}

/// Scalar value of the latent distillation loss on a batch.
pub fn latent_distill_loss<F: Real>(
    teacher: &FrozenTeacher<F>,
    student: &WorldModel<F>,
    batch: &TransitionBatch,
    horizon: usize,
    projection: &Projection,
) -> Result<f64> {
    if matches!(projection, Projection::None) {
        return Err(Error::Invalid("latent distillation needs a projection".into()));
    }
    let mut g = Graph::new();
    let terms = distill_terms(&mut g, teacher, student, batch, horizon, projection)?;
    Ok(g.item(terms.latent.unwrap())?.as_f64())
}

/// `total = original.total + d_coef · distill`.
pub fn total_distill_loss(original: &LossBreakdown, distill: f64, d_coef: f64) -> LossBreakdown {
    LossBreakdown {
        distill,
        total: original.total + d_coef * distill,
        ..*original
    }
}

/// Per-step distillation record.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DistillStep {
    pub breakdown: LossBreakdown,
    pub reward_distill: f64,
    pub latent_distill: f64,
}

/// One optimizer step of the student on the combined objective. With
/// `d_coef == 0` no distillation nodes are built, so the update is the
/// from-scratch update.
#[allow(clippy::too_many_arguments)]
pub fn distill_train_step<F: Real>(
    teacher: &FrozenTeacher<F>,
    student: &mut WorldModel<F>,
    opt: &mut TrainOptim<F>,
    batch: &TransitionBatch,
    coeffs: &LossCoeffs,
    cfg: &DistillConfig,
    projection: &Projection,
    settings: &TrainSettings,
) -> Result<DistillStep> {
    cfg.validate()?;
    let (original, mut lg) = student.original_loss(batch, coeffs)?;
    let mut step = DistillStep {
        breakdown: original,
        ..Default::default()
    };
    let mut total = lg.total;
    if cfg.d_coef > 0.0 {
        let g = &mut lg.graph;
        let proj = match cfg.mode {
            DistillMode::RewardOnly => &Projection::None,
            _ => projection,
        };
        if cfg.mode != DistillMode::RewardOnly && matches!(proj, Projection::None) {
            return Err(Error::Invalid(format!("{} mode needs a projection", cfg.mode.name())));
        }
        let terms = distill_terms(g, teacher, student, batch, coeffs.horizon, proj)?;
        step.reward_distill = g.item(terms.reward)?.as_f64();
        let mut d = terms.reward;
        if let Some(l) = terms.latent {
            step.latent_distill = g.item(l)?.as_f64();
            let scaled = g.scale(l, cfg.latent_coef);
            d = g.add(d, scaled)?;
        }
        let distill = step.reward_distill + cfg.latent_coef * step.latent_distill;
        if !distill.is_finite() {
            return Err(Error::NonFinite("distillation loss".into()));
        }
        let weighted = g.scale(d, cfg.d_coef);
        total = g.add(total, weighted)?;
        step.breakdown = total_distill_loss(&original, distill, cfg.d_coef);
    }
    student.apply_update(opt, &lg.graph, total, &lg.latents, lg.batch_size, settings)?;
    step.breakdown.step = opt.step_count();
    Ok(step)
}

/// Mean of `(R_teacher − R_student)²` over every transition of `dataset`,
/// each model encoding the observations itself.
pub fn heldout_reward_mse<F: Real>(teacher: &FrozenTeacher<F>, student: &WorldModel<F>, dataset: &Dataset) -> Result<f64> {
    check_compatible(&teacher.model, student)?;
    let (mut sum, mut count) = (0.0, 0usize);
    let od = dataset.obs_dim();
    for (i, ep) in dataset.episodes.iter().enumerate() {
        let t = ep.len();
        let obs: Vec<F> = dataset.model_obs(i)[..t * od].iter().map(|&x| F::of(x as f64)).collect();
        let act: Vec<F> = ep.actions.iter().map(|&x| F::of(x as f64)).collect();
        let rt = teacher.model.reward_rows(&teacher.model.encode_rows(&obs, t), &act, t);
        let rs = student.reward_rows(&student.encode_rows(&obs, t), &act, t);
        for (a, b) in rt.iter().zip(&rs) {
            let d = a.as_f64() - b.as_f64();
            sum += d * d;
        }
        count += t;
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(sum / count as f64)
}

/// Next-latent inputs `[z | a]` for a model, used by tests and diagnostics.
pub fn latent_action_rows<F: Real>(model: &WorldModel<F>, obs: &[F], act: &[F], rows: usize) -> Vec<F> {
    concat_rows(&model.encode_rows(obs, rows), model.latent_dim(), act, model.act_dim)
}
