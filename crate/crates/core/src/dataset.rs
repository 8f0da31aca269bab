//! Offline datasets: scripted collection tiers, persistence, splits.
//!
//! Collection rolls scripted behavior policies in the particle env and
//! records every transition. Tiers differ only in action quality: `expert`
//! is a proportional controller toward the landmark with σ = 0.05 Gaussian
//! noise, `medium` the same controller with σ = 0.4 plus 20% fully random
//! episodes, `random` uniform actions, and `mixed` a 50/50 episode
//! concatenation of medium and expert with per-transition provenance kept.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::env::{self, EnvSpec};
use crate::io::{IoError, TensorFile, TAG_DATA};
use crate::rng::derive_rng;
use crate::tensor::Array;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("env mismatch: dataset was collected under spec hash {found:016x}, expected {expected:016x}")]
    EnvMismatch { expected: u64, found: u64 },
    #[error("unknown provenance code {0}")]
    BadProvenance(u8),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

/// Behavior quality requested from the collector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Random,
    Medium,
    Expert,
    Mixed,
}

impl Tier {
    pub fn parse(s: &str) -> Option<Tier> {
        match s {
            "random" => Some(Tier::Random),
            "medium" => Some(Tier::Medium),
            "expert" => Some(Tier::Expert),
            "mixed" => Some(Tier::Mixed),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Tier::Random => "random",
            Tier::Medium => "medium",
            Tier::Expert => "expert",
            Tier::Mixed => "mixed",
        }
    }
}

/// Where a transition (or a whole dataset) came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Random,
    Medium,
    Expert,
    Mixed,
    Synthetic,
}

impl Provenance {
    pub fn code(&self) -> u8 {
        match self {
            Provenance::Random => 0,
            Provenance::Medium => 1,
            Provenance::Expert => 2,
            Provenance::Mixed => 3,
            Provenance::Synthetic => 4,
        }
    }

    pub fn from_code(c: u8) -> Result<Self, DatasetError> {
        Ok(match c {
            0 => Provenance::Random,
            1 => Provenance::Medium,
            2 => Provenance::Expert,
            3 => Provenance::Mixed,
            4 => Provenance::Synthetic,
            other => return Err(DatasetError::BadProvenance(other)),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Provenance::Random => "random",
            Provenance::Medium => "medium",
            Provenance::Expert => "expert",
            Provenance::Mixed => "mixed",
            Provenance::Synthetic => "synthetic",
        }
    }
}

/// One environment step. `priority` is set only on synthetic transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<Vec<f32>>,
    pub state: Vec<f32>,
    pub actions: Vec<Vec<f32>>,
    pub next_state: Vec<f32>,
    pub next_obs: Vec<Vec<f32>>,
    pub reward: f32,
    pub done: bool,
    pub priority: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: EnvSpec,
    pub provenance: Provenance,
    pub transitions: Vec<Transition>,
    /// Per-transition provenance (uniform for pure tiers).
    pub tags: Vec<Provenance>,
}

impl Dataset {
    pub fn empty(spec: EnvSpec, provenance: Provenance) -> Self {
        Dataset { spec, provenance, transitions: Vec::new(), tags: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn push(&mut self, t: Transition, tag: Provenance) {
        self.transitions.push(t);
        self.tags.push(tag);
    }

    /// Consecutive index ranges ending at `done` flags. A trailing
    /// unterminated run still counts as an episode.
    pub fn episode_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, t) in self.transitions.iter().enumerate() {
            if t.done {
                out.push((start, i + 1));
                start = i + 1;
            }
        }
        if start < self.transitions.len() {
            out.push((start, self.transitions.len()));
        }
        out
    }

    /// Undiscounted return of each episode.
    pub fn episode_returns(&self) -> Vec<f64> {
        self.episode_ranges()
            .iter()
            .map(|&(a, b)| self.transitions[a..b].iter().map(|t| t.reward as f64).sum())
            .collect()
    }
}

/// Scripted behavior action for one agent: proportional pull toward the
/// landmark plus Gaussian noise, clamped to the action box.
fn controller_action(obs: &[f32], sigma: f64, rng: &mut ChaCha12Rng) -> Vec<f32> {
    let noise = Normal::new(0.0, sigma).expect("sigma >= 0");
    let gain = 3.0f32;
    (0..2)
        .map(|d| {
            let pull = gain * obs[4 + d];
            let a = pull as f64 + noise.sample(rng);
            (a as f32).clamp(-1.0, 1.0)
        })
        .collect()
}

fn random_action(rng: &mut ChaCha12Rng) -> Vec<f32> {
    (0..2).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Episode-level behavior after tier resolution.
#[derive(Clone, Copy)]
enum EpisodeBehavior {
    Controller { sigma: f64 },
    Uniform,
}

fn tier_episode(tier: Tier, ep: usize, episodes: usize, rng: &mut ChaCha12Rng) -> (EpisodeBehavior, Provenance) {
    match tier {
        Tier::Expert => (EpisodeBehavior::Controller { sigma: 0.05 }, Provenance::Expert),
        Tier::Random => (EpisodeBehavior::Uniform, Provenance::Random),
        Tier::Medium => {
            let u: f64 = rng.random();
            if u < 0.2 {
                (EpisodeBehavior::Uniform, Provenance::Medium)
            } else {
                (EpisodeBehavior::Controller { sigma: 0.4 }, Provenance::Medium)
            }
        }
        Tier::Mixed => {
            if ep < episodes / 2 {
                let u: f64 = rng.random();
                if u < 0.2 {
                    (EpisodeBehavior::Uniform, Provenance::Medium)
                } else {
                    (EpisodeBehavior::Controller { sigma: 0.4 }, Provenance::Medium)
                }
            } else {
                (EpisodeBehavior::Controller { sigma: 0.05 }, Provenance::Expert)
            }
        }
    }
}

/// Rolls `episodes` full episodes of the scripted tier. Deterministic given
/// the seed; episodes draw derived sub-streams so collection order never
/// shifts their contents.
pub fn collect(spec: &EnvSpec, tier: Tier, episodes: usize, seed: u64) -> Dataset {
    assert!(episodes >= 1, "need at least one episode");
    let provenance = match tier {
        Tier::Random => Provenance::Random,
        Tier::Medium => Provenance::Medium,
        Tier::Expert => Provenance::Expert,
        Tier::Mixed => Provenance::Mixed,
    };
    let mut ds = Dataset::empty(spec.clone(), provenance);
    for ep in 0..episodes {
        let mut tier_rng = derive_rng(seed, &format!("collect/tier{ep}"));
        let (behavior, tag) = tier_episode(tier, ep, episodes, &mut tier_rng);
        let mut act_rng = derive_rng(seed, &format!("collect/act{ep}"));
        let env_seed = crate::rng::derive_seed(seed, &format!("collect/ep{ep}"));
        let (mut state, mut obs) = env::reset(spec, env_seed);
        loop {
            let actions: Vec<Vec<f32>> = (0..spec.n_agents)
                .map(|i| match behavior {
                    EpisodeBehavior::Controller { sigma } => {
                        controller_action(&obs[i], sigma, &mut act_rng)
                    }
                    EpisodeBehavior::Uniform => random_action(&mut act_rng),
                })
                .collect();
            let out = env::step(spec, &state, &actions);
            ds.push(
                Transition {
                    obs: obs.clone(),
                    state: state.s.clone(),
                    actions,
                    next_state: out.state.s.clone(),
                    next_obs: out.obs.clone(),
                    reward: out.reward,
                    done: out.done,
                    priority: None,
                },
                tag,
            );
            state = out.state;
            obs = out.obs;
            if ds.transitions.last().unwrap().done {
                break;
            }
        }
    }
    ds
}

/// Serializes to the shared container under section tag `DATA`.
pub fn to_tensor_file(ds: &Dataset) -> TensorFile {
    let spec = &ds.spec;
    let (n, od, ad, sd) = (spec.n_agents, spec.obs_dim, spec.action_dim, spec.state_dim);
    let count = ds.len();
    let mut f = TensorFile::new(TAG_DATA);
    f.push("meta/spec", &[20], crate::io::bytes_as_f32s(&spec.meta_bytes()));
    f.push("meta/provenance", &[1], vec![ds.provenance.code() as f32]);

    let mut state = Vec::with_capacity(count * sd);
    let mut next_state = Vec::with_capacity(count * sd);
    let mut obs = Vec::with_capacity(count * n * od);
    let mut next_obs = Vec::with_capacity(count * n * od);
    let mut actions = Vec::with_capacity(count * n * ad);
    let mut reward = Vec::with_capacity(count);
    let mut done = Vec::with_capacity(count);
    let mut tags = Vec::with_capacity(count);
    let mut priority = Vec::with_capacity(count);
    let mut any_priority = false;
    for (t, tag) in ds.transitions.iter().zip(&ds.tags) {
        state.extend_from_slice(&t.state);
        next_state.extend_from_slice(&t.next_state);
        for o in &t.obs {
            obs.extend_from_slice(o);
        }
        for o in &t.next_obs {
            next_obs.extend_from_slice(o);
        }
        for a in &t.actions {
            actions.extend_from_slice(a);
        }
        reward.push(t.reward);
        done.push(if t.done { 1.0 } else { 0.0 });
        tags.push(tag.code() as f32);
        priority.push(t.priority.unwrap_or(0.0));
        any_priority |= t.priority.is_some();
    }
    f.push("data/state", &[count, sd], state);
    f.push("data/next_state", &[count, sd], next_state);
    f.push("data/obs", &[count, n, od], obs);
    f.push("data/next_obs", &[count, n, od], next_obs);
    f.push("data/actions", &[count, n, ad], actions);
    f.push("data/reward", &[count], reward);
    f.push("data/done", &[count], done);
    f.push("data/prov", &[count], tags);
    if any_priority {
        f.push("data/priority", &[count], priority);
    }
    f
}

pub fn from_tensor_file(f: &TensorFile) -> Result<Dataset, DatasetError> {
    f.expect_tag(TAG_DATA)?;
    let meta = crate::io::f32s_as_bytes(&f.get("meta/spec")?.data)?;
    let spec = EnvSpec::from_meta_bytes(&meta)
        .ok_or_else(|| DatasetError::Inconsistent("unreadable env spec metadata".into()))?;
    let provenance = Provenance::from_code(f.get_scalar("meta/provenance")? as u8)?;
    let (n, od, ad, sd) = (spec.n_agents, spec.obs_dim, spec.action_dim, spec.state_dim);

    let state = f.get("data/state")?;
    let count = state.dims.first().copied().unwrap_or(0);
    let check = |name: &str, dims: &[usize], want: &[usize]| -> Result<(), DatasetError> {
        if dims != want {
            return Err(DatasetError::Inconsistent(format!(
                "{name}: dims {dims:?}, expected {want:?}"
            )));
        }
        Ok(())
    };
    check("data/state", &state.dims, &[count, sd])?;
    let next_state = f.get("data/next_state")?;
    check("data/next_state", &next_state.dims, &[count, sd])?;
    let obs = f.get("data/obs")?;
    check("data/obs", &obs.dims, &[count, n, od])?;
    let next_obs = f.get("data/next_obs")?;
    check("data/next_obs", &next_obs.dims, &[count, n, od])?;
    let actions = f.get("data/actions")?;
    check("data/actions", &actions.dims, &[count, n, ad])?;
    let reward = f.get("data/reward")?;
    check("data/reward", &reward.dims, &[count])?;
    let done = f.get("data/done")?;
    check("data/done", &done.dims, &[count])?;
    let prov = f.get("data/prov")?;
    check("data/prov", &prov.dims, &[count])?;
    let priority = f.get("data/priority").ok();

    let mut ds = Dataset::empty(spec, provenance);
    for i in 0..count {
        let t = Transition {
            obs: (0..n).map(|j| obs.data[(i * n + j) * od..][..od].to_vec()).collect(),
            state: state.data[i * sd..][..sd].to_vec(),
            actions: (0..n).map(|j| actions.data[(i * n + j) * ad..][..ad].to_vec()).collect(),
            next_state: next_state.data[i * sd..][..sd].to_vec(),
            next_obs: (0..n).map(|j| next_obs.data[(i * n + j) * od..][..od].to_vec()).collect(),
            reward: reward.data[i],
            done: done.data[i] != 0.0,
            priority: priority.map(|p| p.data[i]),
        };
        let tag = Provenance::from_code(prov.data[i] as u8)?;
        ds.push(t, tag);
    }
    Ok(ds)
}

pub fn save(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    to_tensor_file(ds).save(path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
    from_tensor_file(&TensorFile::load(path)?)
}

/// Load plus an environment check; training entry points use this so a file
/// collected under a different spec fails with a distinct error kind.
pub fn load_for(path: &Path, expected: &EnvSpec) -> Result<Dataset, DatasetError> {
    let ds = load(path)?;
    if ds.spec.hash() != expected.hash() {
        return Err(DatasetError::EnvMismatch {
            expected: expected.hash(),
            found: ds.spec.hash(),
        });
    }
    Ok(ds)
}

/// Episode-aligned split: shuffles episode order and sends
/// `round(val_fraction · episodes)` (at least 1) to the validation side.
/// Transitions keep their original relative order within each side.
pub fn split(ds: &Dataset, val_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    assert!(
        val_fraction > 0.0 && val_fraction < 0.5,
        "val_fraction must lie in (0, 0.5)"
    );
    let ranges = ds.episode_ranges();
    let n_eps = ranges.len();
    let n_val = ((val_fraction * n_eps as f64).round() as usize).clamp(1, n_eps.saturating_sub(1).max(1));
    let mut order: Vec<usize> = (0..n_eps).collect();
    let mut rng = derive_rng(seed, "dataset/split");
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let val_set: std::collections::BTreeSet<usize> = order[..n_val].iter().copied().collect();

    let mut train = Dataset::empty(ds.spec.clone(), ds.provenance);
    let mut val = Dataset::empty(ds.spec.clone(), ds.provenance);
    for (ep, &(a, b)) in ranges.iter().enumerate() {
        let target = if val_set.contains(&ep) { &mut val } else { &mut train };
        for i in a..b {
            target.push(ds.transitions[i].clone(), ds.tags[i]);
        }
    }
    (train, val)
}

/// Batch view with everything the loss graphs consume, f64-widened.
#[derive(Debug, Clone)]
pub struct Batch {
    pub rows: usize,
    /// Per-agent `[B, obs_dim]`.
    pub obs: Vec<Array>,
    /// Per-agent `[B, action_dim]`.
    pub actions: Vec<Array>,
    /// `[B, n·action_dim]`.
    pub joint_action: Array,
    pub state: Array,
    pub next_state: Array,
    /// Per-agent `[B, obs_dim]`.
    pub next_obs: Vec<Array>,
    /// `[B, n·obs_dim]`.
    pub joint_next_obs: Array,
    /// `[B, 1]`.
    pub reward: Array,
    /// `[B, 1]`, 1.0 at episode ends.
    pub done: Array,
    /// `[B, state_dim+1]`: next state with the reward appended.
    pub state_reward: Array,
}

pub fn make_batch(spec: &EnvSpec, items: &[&Transition]) -> Batch {
    let rows = items.len();
    let (n, od, ad, sd) = (spec.n_agents, spec.obs_dim, spec.action_dim, spec.state_dim);
    let mut obs = vec![Vec::with_capacity(rows * od); n];
    let mut next_obs = vec![Vec::with_capacity(rows * od); n];
    let mut actions = vec![Vec::with_capacity(rows * ad); n];
    let mut joint_action = Vec::with_capacity(rows * n * ad);
    let mut joint_next_obs = Vec::with_capacity(rows * n * od);
    let mut state = Vec::with_capacity(rows * sd);
    let mut next_state = Vec::with_capacity(rows * sd);
    let mut reward = Vec::with_capacity(rows);
    let mut done = Vec::with_capacity(rows);
    let mut state_reward = Vec::with_capacity(rows * (sd + 1));
    for t in items {
        for i in 0..n {
            obs[i].extend(t.obs[i].iter().map(|&v| v as f64));
            next_obs[i].extend(t.next_obs[i].iter().map(|&v| v as f64));
            actions[i].extend(t.actions[i].iter().map(|&v| v as f64));
            joint_action.extend(t.actions[i].iter().map(|&v| v as f64));
            joint_next_obs.extend(t.next_obs[i].iter().map(|&v| v as f64));
        }
        state.extend(t.state.iter().map(|&v| v as f64));
        next_state.extend(t.next_state.iter().map(|&v| v as f64));
        reward.push(t.reward as f64);
        done.push(if t.done { 1.0 } else { 0.0 });
        state_reward.extend(t.next_state.iter().map(|&v| v as f64));
        state_reward.push(t.reward as f64);
    }
    Batch {
        rows,
        obs: obs.into_iter().map(|d| Array::from_vec(&[rows, od], d).unwrap()).collect(),
        actions: actions.into_iter().map(|d| Array::from_vec(&[rows, ad], d).unwrap()).collect(),
        joint_action: Array::from_vec(&[rows, n * ad], joint_action).unwrap(),
        state: Array::from_vec(&[rows, sd], state).unwrap(),
        next_state: Array::from_vec(&[rows, sd], next_state).unwrap(),
        next_obs: next_obs.into_iter().map(|d| Array::from_vec(&[rows, od], d).unwrap()).collect(),
        joint_next_obs: Array::from_vec(&[rows, n * od], joint_next_obs).unwrap(),
        reward: Array::from_vec(&[rows, 1], reward).unwrap(),
        done: Array::from_vec(&[rows, 1], done).unwrap(),
        state_reward: Array::from_vec(&[rows, sd + 1], state_reward).unwrap(),
    }
}
