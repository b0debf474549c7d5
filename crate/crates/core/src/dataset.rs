//! Offline episode storage and minibatch sampling.
//!
//! Episode files (`.mtep`) are little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MTEP"
//! 4       4     u32 version (1)
//! 8       4     u32 obs_dim
//! 12      4     u32 act_dim
//! 16      4     u32 T (transitions)
//! 20      2     u16 task-name length n
//! 22      n     task name, UTF-8
//! 22+n    ...   f32 obs[(T+1)·obs_dim], f32 actions[T·act_dim], f32 rewards[T]
//! ```
//!
//! A dataset directory holds the episode files plus `manifest.txt`, one
//! tab-separated line per episode: `file  task  policy  seed`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::envs::{self, model_obs, Env, Task, MODEL_OBS_DIM};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, Rng};
use crate::world_model::WorldModel;

pub const EPISODE_MAGIC: &[u8; 4] = b"MTEP";
pub const EPISODE_VERSION: u32 = 1;
/// magic, version, obs_dim, act_dim.
pub const EPISODE_HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Gaussian action noise added to scripted and agent behaviour.
pub const BEHAVIOR_NOISE_STD: f64 = 0.3;
/// Set in every evaluation seed and clear in every data-collection seed.
pub const EVAL_SEED_BIT: u64 = 1 << 63;

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: Task,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// `(T+1) × obs_dim`, row-major.
    pub obs: Vec<f32>,
    /// `T × act_dim`.
    pub actions: Vec<f32>,
    /// `T`.
    pub rewards: Vec<f32>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.rewards.len();
        if self.obs.len() != (t + 1) * self.obs_dim || self.actions.len() != t * self.act_dim {
            return Err(Error::Format(format!(
                "episode arrays inconsistent: obs {}, actions {}, rewards {t}",
                self.obs.len(),
                self.actions.len()
            )));
        }
        let finite = |v: &[f32]| v.iter().all(|x| x.is_finite());
        if !(finite(&self.obs) && finite(&self.actions) && finite(&self.rewards)) {
            return Err(Error::NonFinite("episode data".into()));
        }
        Ok(())
    }

    pub fn return_sum(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }

    /// Exact size of the serialized file.
    pub fn encoded_len(&self) -> usize {
        EPISODE_HEADER_LEN
            + 4
            + 2
            + self.task.name().len()
            + 4 * (self.obs.len() + self.actions.len() + self.rewards.len())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let name = self.task.name().as_bytes();
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(EPISODE_MAGIC);
        out.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.obs_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.act_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        for v in [&self.obs, &self.actions, &self.rewards] {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != EPISODE_MAGIC {
            return Err(Error::BadMagic {
                expected: "MTEP",
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != EPISODE_VERSION {
            return Err(Error::Version {
                expected: EPISODE_VERSION,
                found: version,
            });
        }
        let obs_dim = r.u32("obs_dim")? as usize;
        let act_dim = r.u32("act_dim")? as usize;
        let t = r.u32("length")? as usize;
        let name_len = r.u16("task name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "task name")?)
            .map_err(|_| Error::Format("task name is not UTF-8".into()))?;
        let task = Task::parse(name)?;
        let obs = r.f32s((t + 1) * obs_dim, "observations")?;
        let actions = r.f32s(t * act_dim, "actions")?;
        let rewards = r.f32s(t, "rewards")?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after episode payload",
                bytes.len() - r.pos
            )));
        }
        let ep = Episode {
            task,
            obs_dim,
            act_dim,
            obs,
            actions,
            rewards,
        };
        ep.validate()?;
        Ok(ep)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated(format!(
                "need {n} bytes for {what} at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn write_episode(path: &Path, episode: &Episode) -> Result<()> {
    fs::write(path, episode.to_bytes()?)?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    Episode::from_bytes(&fs::read(path)?)
}

/// Sampled `H`-step training windows.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub batch_size: usize,
    pub horizon: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// `B × (H+1) × obs_dim`.
    pub obs: Vec<f32>,
    /// `B × H × act_dim`.
    pub actions: Vec<f32>,
    /// `B × H`.
    pub rewards: Vec<f32>,
    pub task_ids: Vec<usize>,
    /// `(episode index, start step)` of each window.
    pub sources: Vec<(usize, usize)>,
}

impl TransitionBatch {
    /// Observations at window offset `t` as a packed `B × obs_dim` matrix.
    pub fn obs_at(&self, t: usize) -> Vec<f32> {
        let (h1, d) = (self.horizon + 1, self.obs_dim);
        (0..self.batch_size)
            .flat_map(|b| self.obs[(b * h1 + t) * d..(b * h1 + t + 1) * d].iter().copied())
            .collect()
    }

    pub fn actions_at(&self, t: usize) -> Vec<f32> {
        let (h, d) = (self.horizon, self.act_dim);
        (0..self.batch_size)
            .flat_map(|b| self.actions[(b * h + t) * d..(b * h + t + 1) * d].iter().copied())
            .collect()
    }

    /// Rewards at offset `t`, one per row.
    pub fn rewards_at(&self, t: usize) -> Vec<f32> {
        (0..self.batch_size)
            .map(|b| self.rewards[b * self.horizon + t])
            .collect()
    }
}

/// Episodes held in memory with model-facing observations precomputed.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    model_obs: Vec<Vec<f32>>,
    /// Cumulative count of valid window starts for the last `H` seen.
    starts_cache: std::cell::RefCell<Option<(usize, Vec<usize>)>>,
}

impl Dataset {
    pub fn new(episodes: Vec<Episode>) -> Result<Self> {
        let mut model = Vec::with_capacity(episodes.len());
        for ep in &episodes {
            ep.validate()?;
            if ep.act_dim != envs::ACT_DIM {
                return Err(Error::shape("episode act_dim", &[envs::ACT_DIM], &[ep.act_dim]));
            }
            let rows: Vec<f32> = ep
                .obs
                .chunks_exact(ep.obs_dim)
                .flat_map(|row| model_obs(ep.task, row))
                .collect();
            model.push(rows);
        }
        Ok(Self {
            episodes,
            model_obs: model,
            starts_cache: Default::default(),
        })
    }

    /// Loads every episode listed in the directory manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let episodes = manifest
            .entries
            .iter()
            .map(|e| read_episode(&dir.join(&e.file)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(episodes)
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        MODEL_OBS_DIM
    }

    pub fn act_dim(&self) -> usize {
        envs::ACT_DIM
    }

    /// Model-facing observation rows of episode `i`.
    pub fn model_obs(&self, i: usize) -> &[f32] {
        &self.model_obs[i]
    }

    /// Splits off every `k`-th episode (by index) as a held-out set.
    pub fn split_every(&self, k: usize) -> Result<(Dataset, Dataset)> {
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (i, ep) in self.episodes.iter().enumerate() {
            if k > 0 && i % k == k - 1 {
                held.push(ep.clone());
            } else {
                train.push(ep.clone());
            }
        }
        Ok((Dataset::new(train)?, Dataset::new(held)?))
    }

    fn cumulative_starts(&self, horizon: usize) -> Vec<usize> {
        if let Some((h, c)) = &*self.starts_cache.borrow() {
            if *h == horizon {
                return c.clone();
            }
        }
        let mut acc = 0;
        let cum: Vec<usize> = self
            .episodes
            .iter()
            .map(|ep| {
                acc += (ep.len() + 1).saturating_sub(horizon);
                acc
            })
            .collect();
        *self.starts_cache.borrow_mut() = Some((horizon, cum.clone()));
        cum
    }

    /// Draws `batch_size` windows uniformly over all valid
    /// `(episode, start)` pairs. Windows never cross episode boundaries.
    pub fn sample_batch(&self, batch_size: usize, horizon: usize, rng: &mut Rng) -> Result<TransitionBatch> {
        if self.episodes.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if horizon == 0 || batch_size == 0 {
            return Err(Error::Invalid("batch size and horizon must be positive".into()));
        }
        let cum = self.cumulative_starts(horizon);
        let total = *cum.last().unwrap();
        if total == 0 {
            return Err(Error::Invalid(format!(
                "horizon {horizon} exceeds every episode length"
            )));
        }
        let (od, ad) = (MODEL_OBS_DIM, envs::ACT_DIM);
        let mut batch = TransitionBatch {
            batch_size,
            horizon,
            obs_dim: od,
            act_dim: ad,
            obs: Vec::with_capacity(batch_size * (horizon + 1) * od),
            actions: Vec::with_capacity(batch_size * horizon * ad),
            rewards: Vec::with_capacity(batch_size * horizon),
            task_ids: Vec::with_capacity(batch_size),
            sources: Vec::with_capacity(batch_size),
        };
        for _ in 0..batch_size {
            let idx = rng.random_range(0..total);
            let ep_i = cum.partition_point(|&c| c <= idx);
            let before = if ep_i == 0 { 0 } else { cum[ep_i - 1] };
            let start = idx - before;
            let ep = &self.episodes[ep_i];
            let mobs = &self.model_obs[ep_i];
            batch.obs.extend_from_slice(&mobs[start * od..(start + horizon + 1) * od]);
            batch
                .actions
                .extend_from_slice(&ep.actions[start * ad..(start + horizon) * ad]);
            batch.rewards.extend_from_slice(&ep.rewards[start..start + horizon]);
            batch.task_ids.push(ep.task.index());
            batch.sources.push((ep_i, start));
        }
        Ok(batch)
    }
}

/// How actions are chosen while generating data.
#[derive(Clone, Debug)]
pub enum BehaviorPolicy {
    Random,
    /// Task controller plus Gaussian noise.
    Scripted,
    /// Policy head of a trained model plus Gaussian noise.
    Agent(Box<WorldModel<f32>>),
    /// Per-episode draw: random with probability `random_frac`, else scripted.
    Mixture { random_frac: f64 },
}

impl BehaviorPolicy {
    /// Parses `random`, `scripted`, `mixture` (50/50) or `mixture:<random fraction>`.
    /// Agent policies are built from a checkpoint by the caller.
    pub fn parse_simple(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BehaviorPolicy::Random),
            "scripted" | "scripted-energy-swingup" => Ok(BehaviorPolicy::Scripted),
            "mixture" => Ok(BehaviorPolicy::Mixture { random_frac: 0.5 }),
            other => {
                if let Some(f) = other.strip_prefix("mixture:") {
                    let random_frac: f64 = f
                        .parse()
                        .map_err(|_| Error::Config(format!("bad mixture fraction {f:?}")))?;
                    if !(0.0..=1.0).contains(&random_frac) {
                        return Err(Error::Config(format!("mixture fraction {random_frac} outside [0,1]")));
                    }
                    return Ok(BehaviorPolicy::Mixture { random_frac });
                }
                Err(Error::Config(format!("unknown behaviour policy {other:?}")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub task: Task,
    pub policy: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.file, e.task.name(), e.policy, e.seed))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Format(format!("manifest line {}: expected 4 fields", n + 1)));
            }
            entries.push(ManifestEntry {
                file: cols[0].to_string(),
                task: Task::parse(cols[1])?,
                policy: cols[2].to_string(),
                seed: cols[3]
                    .parse()
                    .map_err(|_| Error::Format(format!("manifest line {}: bad seed", n + 1)))?,
            });
        }
        Ok(Self { entries })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingInput(format!("dataset manifest {}", path.display())));
        }
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn count(&self, task: Task) -> usize {
        self.entries.iter().filter(|e| e.task == task).count()
    }
}

/// Rolls out one episode under `policy`. Returns the episode and its label.
pub fn collect_episode(env: &Env, policy: &BehaviorPolicy, seed: u64) -> Result<(Episode, String)> {
    let mut rng = rng_from(seed, &[0xbe4a]);
    let (label, mode) = match policy {
        BehaviorPolicy::Random => ("random", 0),
        BehaviorPolicy::Scripted => ("scripted", 1),
        BehaviorPolicy::Agent(_) => ("agent", 2),
        BehaviorPolicy::Mixture { random_frac } => {
            if rng.random::<f64>() < *random_frac {
                ("random", 0)
            } else {
                ("scripted", 1)
            }
        }
    };
    let spec = env.spec();
    let (mut state, obs) = env.reset(seed);
    let mut ep = Episode {
        task: env.task,
        obs_dim: spec.obs_dim,
        act_dim: spec.act_dim,
        obs: obs.clone(),
        actions: Vec::with_capacity(spec.episode_len),
        rewards: Vec::with_capacity(spec.episode_len),
    };
    let mut last_obs = obs;
    for _ in 0..spec.episode_len {
        let a = match (mode, policy) {
            (0, _) => envs::random_action(&mut rng),
            (1, _) => envs::noisy(env.scripted_action(&state), BEHAVIOR_NOISE_STD, &mut rng),
            (_, BehaviorPolicy::Agent(model)) => {
                let z = model.encode_rows(&model_obs(env.task, &last_obs), 1);
                let a = model.policy_rows(&z, 1)[0];
                envs::noisy(a, BEHAVIOR_NOISE_STD, &mut rng)
            }
            _ => unreachable!(),
        };
        let step = env.step(&state, &[a])?;
        ep.actions.push(a);
        ep.rewards.push(step.reward);
        ep.obs.extend_from_slice(&step.obs);
        last_obs = step.obs;
        state = step.state;
    }
    Ok((ep, label.to_string()))
}

/// Writes `episodes_per_task` episodes per task plus a manifest into `dir`.
pub fn generate_dataset(
    dir: &Path,
    tasks: &[Task],
    policy: &BehaviorPolicy,
    episodes_per_task: usize,
    seed: u64,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    for &task in tasks {
        let env = Env::new(task);
        for i in 0..episodes_per_task {
            let ep_seed = derive_seed(seed, &[task.index() as u64, i as u64]) & !EVAL_SEED_BIT;
            let (ep, label) = collect_episode(&env, policy, ep_seed)?;
            let file = format!("{}_{:05}.mtep", task.name(), i);
            write_episode(&dir.join(&file), &ep)?;
            manifest.entries.push(ManifestEntry {
                file,
                task,
                policy: label,
                seed: ep_seed,
            });
        }
    }
    fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(manifest)
}

/// Episode files present in `dir`.
pub fn list_episode_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mtep"))
        .collect();
    files.sort();
    Ok(files)
}
