//! Three small continuous-control tasks with per-step rewards in [0, 1].
//!
//! | task               | raw obs                                   | act |
//! |--------------------|-------------------------------------------|-----|
//! | `pendulum-swingup` | cos θ, sin θ, ω                           | 1   |
//! | `cartpole-balance` | x, ẋ, cos θ, sin θ, θ̇                     | 1   |
//! | `cup-catch`        | cup x, ball x − cup x, ball y, ball vy, caught | 1 |
//!
//! Angles are measured from upright. Every episode lasts [`EPISODE_LEN`]
//! steps of [`DT`] seconds, integrated with semi-implicit Euler.
//!
//! Physical constants:
//! - pendulum: g = 9.81, l = 1, m = 1, τ_max = 5, damping c = 0.1, |ω| ≤ 8
//! - cartpole: g = 9.8, cart 1.0 kg, pole 0.1 kg, half-length 0.5 m, force 10·a N,
//!   |ẋ| ≤ 10 m/s, |θ̇| ≤ 20 rad/s, rewarded only while |x| < 2.4
//! - cup-catch: ball falls under g = 9.81 and rests on the floor (y = 0) if
//!   missed; cup moves at 2·a m/s within |x| ≤ 1; a ball within 0.1 m of the
//!   cup on both axes is caught and stays caught.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};

pub const EPISODE_LEN: usize = 200;
pub const DT: f64 = 0.05;
pub const ACT_DIM: usize = 1;
/// Widest raw observation; shorter ones are zero padded.
pub const MAX_RAW_OBS: usize = 5;
pub const NUM_TASKS: usize = 3;
/// Model-facing observation: padded raw obs followed by a one-hot task id.
pub const MODEL_OBS_DIM: usize = MAX_RAW_OBS + NUM_TASKS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    PendulumSwingup,
    CartpoleBalance,
    CupCatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub task_id: &'static str,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub episode_len: usize,
    pub dt: f64,
}

impl Task {
    pub const ALL: [Task; NUM_TASKS] = [Task::PendulumSwingup, Task::CartpoleBalance, Task::CupCatch];

    pub fn name(self) -> &'static str {
        match self {
            Task::PendulumSwingup => "pendulum-swingup",
            Task::CartpoleBalance => "cartpole-balance",
            Task::CupCatch => "cup-catch",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Task::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::UnknownTask(format!("#{i}")))
    }

    pub fn spec(self) -> EnvSpec {
        EnvSpec {
            task_id: self.name(),
            obs_dim: self.obs_dim(),
            act_dim: ACT_DIM,
            episode_len: EPISODE_LEN,
            dt: DT,
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            Task::PendulumSwingup => 3,
            Task::CartpoleBalance | Task::CupCatch => 5,
        }
    }

    /// Length of the flat vector used by [`EnvState::to_vec`].
    pub fn state_dim(self) -> usize {
        match self {
            Task::PendulumSwingup => 2,
            Task::CartpoleBalance => 4,
            Task::CupCatch => 5,
        }
    }
}

/// Parses a comma-separated task list; `all` selects every task.
pub fn parse_tasks(list: &str) -> Result<Vec<Task>> {
    if list.trim() == "all" {
        return Ok(Task::ALL.to_vec());
    }
    list.split(',')
        .map(|s| Task::parse(s.trim()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EnvState {
    Pendulum {
        theta: f64,
        omega: f64,
        t: usize,
    },
    Cartpole {
        x: f64,
        x_dot: f64,
        theta: f64,
        theta_dot: f64,
        t: usize,
    },
    Cup {
        cup_x: f64,
        ball_x: f64,
        ball_y: f64,
        ball_vy: f64,
        caught: bool,
        t: usize,
    },
}

impl EnvState {
    pub fn task(&self) -> Task {
        match self {
            EnvState::Pendulum { .. } => Task::PendulumSwingup,
            EnvState::Cartpole { .. } => Task::CartpoleBalance,
            EnvState::Cup { .. } => Task::CupCatch,
        }
    }

    pub fn step_count(&self) -> usize {
        match *self {
            EnvState::Pendulum { t, .. } | EnvState::Cartpole { t, .. } | EnvState::Cup { t, .. } => t,
        }
    }

    fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }

    /// Flat physical state (without the step counter).
    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            EnvState::Pendulum { theta, omega, .. } => vec![theta, omega],
            EnvState::Cartpole {
                x,
                x_dot,
                theta,
                theta_dot,
                ..
            } => vec![x, x_dot, theta, theta_dot],
            EnvState::Cup {
                cup_x,
                ball_x,
                ball_y,
                ball_vy,
                caught,
                ..
            } => vec![cup_x, ball_x, ball_y, ball_vy, if caught { 1.0 } else { 0.0 }],
        }
    }

    pub fn from_vec(task: Task, v: &[f64]) -> Result<Self> {
        if v.len() != task.state_dim() {
            return Err(Error::shape("state", &[task.state_dim()], &[v.len()]));
        }
        Ok(match task {
            Task::PendulumSwingup => EnvState::Pendulum {
                theta: v[0],
                omega: v[1],
                t: 0,
            },
            Task::CartpoleBalance => EnvState::Cartpole {
                x: v[0],
                x_dot: v[1],
                theta: v[2],
                theta_dot: v[3],
                t: 0,
            },
            Task::CupCatch => EnvState::Cup {
                cup_x: v[0],
                ball_x: v[1],
                ball_y: v[2],
                ball_vy: v[3],
                caught: v[4] > 0.5,
                t: 0,
            },
        })
    }

    /// Recovers the physical state from a raw observation.
    pub fn from_obs(task: Task, obs: &[f32]) -> Result<Self> {
        if obs.len() < task.obs_dim() {
            return Err(Error::shape("observation", &[task.obs_dim()], &[obs.len()]));
        }
        let o: Vec<f64> = obs.iter().map(|&x| x as f64).collect();
        Ok(match task {
            Task::PendulumSwingup => EnvState::Pendulum {
                theta: o[1].atan2(o[0]),
                omega: o[2],
                t: 0,
            },
            Task::CartpoleBalance => EnvState::Cartpole {
                x: o[0],
                x_dot: o[1],
                theta: o[3].atan2(o[2]),
                theta_dot: o[4],
                t: 0,
            },
            Task::CupCatch => EnvState::Cup {
                cup_x: o[0],
                ball_x: o[0] + o[1],
                ball_y: o[2],
                ball_vy: o[3],
                caught: o[4] > 0.5,
                t: 0,
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumParams {
    pub gravity: f64,
    pub length: f64,
    pub mass: f64,
    pub max_torque: f64,
    pub damping: f64,
    pub max_speed: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            length: 1.0,
            mass: 1.0,
            max_torque: 5.0,
            damping: 0.1,
            max_speed: 8.0,
        }
    }
}

impl PendulumParams {
    /// Mechanical energy per unit m·l², zero when hanging at rest.
    pub fn energy(&self, theta: f64, omega: f64) -> f64 {
        0.5 * omega * omega + self.gravity / self.length * (1.0 + theta.cos())
    }
}

const CART_GRAVITY: f64 = 9.8;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const POLE_HALF_LENGTH: f64 = 0.5;
const CART_FORCE: f64 = 10.0;
const CART_X_LIMIT: f64 = 2.4;
const CART_MAX_SPEED: f64 = 10.0;
const POLE_MAX_SPEED: f64 = 20.0;

const CUP_GRAVITY: f64 = 9.81;
const CUP_SPEED: f64 = 2.0;
const CUP_X_LIMIT: f64 = 1.0;
const CATCH_RADIUS: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: EnvState,
    pub obs: Vec<f32>,
    pub reward: f32,
}

/// A task with its physical parameters. Cheap to copy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Env {
    pub task: Task,
    pub pendulum: PendulumParams,
}

impl Env {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            pendulum: PendulumParams::default(),
        }
    }

    pub fn spec(&self) -> EnvSpec {
        self.task.spec()
    }

    pub fn reset(&self, seed: u64) -> (EnvState, Vec<f32>) {
        let mut rng = rng_from(seed, &[self.task.index() as u64]);
        let state = match self.task {
            Task::PendulumSwingup => EnvState::Pendulum {
                theta: PI + rng.random_range(-0.1..=0.1),
                omega: 0.0,
                t: 0,
            },
            Task::CartpoleBalance => {
                let mut u = || rng.random_range(-0.05..=0.05);
                EnvState::Cartpole {
                    x: u(),
                    x_dot: u(),
                    theta: u(),
                    theta_dot: u(),
                    t: 0,
                }
            }
            Task::CupCatch => EnvState::Cup {
                cup_x: rng.random_range(-0.5..=0.5),
                ball_x: rng.random_range(-0.8..=0.8),
                ball_y: rng.random_range(1.0..=1.5),
                ball_vy: 0.0,
                caught: false,
                t: 0,
            },
        };
        let obs = self.observe(&state);
        (state, obs)
    }

    pub fn observe(&self, state: &EnvState) -> Vec<f32> {
        let v: Vec<f64> = match *state {
            EnvState::Pendulum { theta, omega, .. } => vec![theta.cos(), theta.sin(), omega],
            EnvState::Cartpole {
                x,
                x_dot,
                theta,
                theta_dot,
                ..
            } => vec![x, x_dot, theta.cos(), theta.sin(), theta_dot],
            EnvState::Cup {
                cup_x,
                ball_x,
                ball_y,
                ball_vy,
                caught,
                ..
            } => vec![cup_x, ball_x - cup_x, ball_y, ball_vy, if caught { 1.0 } else { 0.0 }],
        };
        v.into_iter().map(|x| x as f32).collect()
    }

    /// Reward of landing in `state`.
    pub fn reward(&self, state: &EnvState) -> f32 {
        let r = match *state {
            EnvState::Pendulum { theta, .. } => (1.0 + theta.cos()) / 2.0,
            EnvState::Cartpole { x, theta, .. } => {
                if x.abs() < CART_X_LIMIT {
                    (1.0 + theta.cos()) / 2.0
                } else {
                    0.0
                }
            }
            EnvState::Cup { caught, .. } => {
                if caught {
                    1.0
                } else {
                    0.0
                }
            }
        };
        r as f32
    }

    /// Advances one step. Actions are clamped to [-1, 1].
    pub fn step(&self, state: &EnvState, action: &[f32]) -> Result<Step> {
        if action.len() != ACT_DIM {
            return Err(Error::shape("action", &[ACT_DIM], &[action.len()]));
        }
        if state.task() != self.task {
            return Err(Error::Invalid(format!(
                "state for {} passed to {}",
                state.task().name(),
                self.task.name()
            )));
        }
        let a = action[0] as f64;
        if !a.is_finite() {
            return Err(Error::NonFinite("action".into()));
        }
        let a = a.clamp(-1.0, 1.0);
        let next = match *state {
            EnvState::Pendulum { theta, omega, t } => {
                let p = &self.pendulum;
                let alpha = p.gravity / p.length * theta.sin()
                    + p.max_torque * a / (p.mass * p.length * p.length)
                    - p.damping * omega;
                let omega = (omega + DT * alpha).clamp(-p.max_speed, p.max_speed);
                EnvState::Pendulum {
                    theta: theta + DT * omega,
                    omega,
                    t: t + 1,
                }
            }
            EnvState::Cartpole {
                x,
                x_dot,
                theta,
                theta_dot,
                t,
            } => {
                let force = CART_FORCE * a;
                let (sin, cos) = theta.sin_cos();
                let total = CART_MASS + POLE_MASS;
                let pml = POLE_MASS * POLE_HALF_LENGTH;
                let temp = (force + pml * theta_dot * theta_dot * sin) / total;
                let theta_acc = (CART_GRAVITY * sin - cos * temp)
                    / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total));
                let x_acc = temp - pml * theta_acc * cos / total;
                let x_dot = (x_dot + DT * x_acc).clamp(-CART_MAX_SPEED, CART_MAX_SPEED);
                let theta_dot = (theta_dot + DT * theta_acc).clamp(-POLE_MAX_SPEED, POLE_MAX_SPEED);
                EnvState::Cartpole {
                    x: x + DT * x_dot,
                    x_dot,
                    theta: theta + DT * theta_dot,
                    theta_dot,
                    t: t + 1,
                }
            }
            EnvState::Cup {
                cup_x,
                ball_x,
                ball_y,
                ball_vy,
                caught,
                t,
            } => {
                let cup_x = (cup_x + DT * CUP_SPEED * a).clamp(-CUP_X_LIMIT, CUP_X_LIMIT);
                let (mut bx, mut by, mut vy) = (ball_x, ball_y, ball_vy);
                if caught {
                    bx = cup_x;
                    by = 0.0;
                    vy = 0.0;
                } else {
                    vy -= CUP_GRAVITY * DT;
                    by += DT * vy;
                    if by <= 0.0 {
                        by = 0.0;
                        vy = 0.0;
                    }
                }
                let caught =
                    caught || ((bx - cup_x).abs() < CATCH_RADIUS && by.abs() < CATCH_RADIUS);
                EnvState::Cup {
                    cup_x,
                    ball_x: bx,
                    ball_y: by,
                    ball_vy: vy,
                    caught,
                    t: t + 1,
                }
            }
        };
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("{} state", self.task.name())));
        }
        Ok(Step {
            obs: self.observe(&next),
            reward: self.reward(&next),
            state: next,
        })
    }

    /// Hand-written controller used to generate informative offline data.
    /// Pendulum pumps energy then switches to a PD catch near the top.
    pub fn scripted_action(&self, state: &EnvState) -> f32 {
        let a = match *state {
            EnvState::Pendulum { theta, omega, .. } => {
                let p = &self.pendulum;
                let wrapped = wrap_angle(theta);
                if wrapped.cos() > 0.8 {
                    -(30.0 * wrapped + 5.0 * omega) / p.max_torque
                } else {
                    let target = 2.0 * p.gravity / p.length;
                    let e = p.energy(theta, omega);
                    let dir = if omega.abs() < 1e-3 { 1.0 } else { omega.signum() };
                    5.0 * (target - e) * dir
                }
            }
            EnvState::Cartpole {
                x,
                x_dot,
                theta,
                theta_dot,
                ..
            } => (18.0 * wrap_angle(theta) + 3.0 * theta_dot + 0.6 * x + 1.2 * x_dot) / CART_FORCE,
            EnvState::Cup {
                cup_x, ball_x, ..
            } => 5.0 * (ball_x - cup_x),
        };
        a.clamp(-1.0, 1.0) as f32
    }
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

/// Zero-pads a raw observation and appends the one-hot task id.
pub fn model_obs(task: Task, raw: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; MODEL_OBS_DIM];
    out[..raw.len()].copy_from_slice(raw);
    out[MAX_RAW_OBS + task.index()] = 1.0;
    out
}

/// Inverse of [`model_obs`]: the task from the one-hot tail and the raw obs.
pub fn split_model_obs(obs: &[f32]) -> Result<(Task, Vec<f32>)> {
    if obs.len() != MODEL_OBS_DIM {
        return Err(Error::shape("model obs", &[MODEL_OBS_DIM], &[obs.len()]));
    }
    let idx = (0..NUM_TASKS)
        .max_by(|&a, &b| obs[MAX_RAW_OBS + a].total_cmp(&obs[MAX_RAW_OBS + b]))
        .unwrap();
    let task = Task::from_index(idx)?;
    Ok((task, obs[..task.obs_dim()].to_vec()))
}

/// Maps an undiscounted return to the 0–1000 task scale.
pub fn task_score(episode_return: f64, episode_len: usize) -> Result<f64> {
    let max = episode_len as f64;
    if !episode_return.is_finite() || episode_return < 0.0 || episode_return > max + 1e-9 {
        return Err(Error::Invalid(format!(
            "episode return {episode_return} outside [0, {max}]"
        )));
    }
    Ok(1000.0 * episode_return / max)
}

/// Uniform random action in [-1, 1].
pub fn random_action(rng: &mut Rng) -> f32 {
    rng.random_range(-1.0f32..=1.0)
}

/// Scripted action perturbed by Gaussian noise, clamped to [-1, 1].
pub fn noisy(action: f32, std: f64, rng: &mut Rng) -> f32 {
    if std <= 0.0 {
        return action;
    }
    let n = Normal::new(0.0, std).expect("positive std").sample(rng);
    (action as f64 + n).clamp(-1.0, 1.0) as f32
}
