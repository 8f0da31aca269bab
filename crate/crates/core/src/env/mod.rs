//! Built-in cooperative environments.
//!
//! The training substrate is a continuous-action particle-navigation task:
//! `n` agents on the [−1,1]² arena each steer toward an assigned landmark
//! and share one reward, observing only their own frame plus nearby agents.
//! The global state under-determines any single observation, which is the
//! structure the local-to-global world model exploits.
//!
//! Dynamics run in f32 end to end so that stored transitions replay through
//! [`step`] bitwise. The enumerable [`tabular::TabularMDP`] lives in its own
//! submodule and exists for oracle verification only.

pub mod tabular;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::rng::derive_rng;

/// Position step per unit velocity.
pub const DT: f32 = 0.1;
/// Arena half-width; positions are clamped to [−ARENA, ARENA].
pub const ARENA: f32 = 1.0;
/// Initial positions and landmarks are uniform on [−INIT_RANGE, INIT_RANGE]².
pub const INIT_RANGE: f32 = 0.9;
/// Agents closer than this incur the collision penalty, per pair.
pub const COLLISION_RADIUS: f32 = 0.1;
pub const COLLISION_PENALTY: f32 = 0.25;

/// Environment signature shared by datasets, world models, and policies.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub episode_cap: u32,
    pub gamma: f64,
    pub sensing_radius: f32,
}

impl EnvSpec {
    /// Particle navigation: state is [positions 2n | velocities 2n |
    /// landmarks 2n]; each agent observes own position, own velocity, the
    /// offset to its landmark, and offsets to other agents within
    /// `sensing_radius` (zeros beyond it).
    pub fn particle(n_agents: usize, episode_cap: u32, gamma: f64, sensing_radius: f32) -> Self {
        assert!(n_agents >= 1);
        assert!(gamma < 1.0);
        EnvSpec {
            n_agents,
            state_dim: 6 * n_agents,
            obs_dim: 6 + 2 * (n_agents - 1),
            action_dim: 2,
            episode_cap,
            gamma,
            sensing_radius,
        }
    }

    /// Reward floor: mean landmark distance is at most the arena diagonal
    /// and every agent pair can collide at once.
    pub fn reward_floor(&self) -> f32 {
        let diag = 2.0 * ARENA * std::f32::consts::SQRT_2;
        let pairs = (self.n_agents * (self.n_agents - 1) / 2) as f32;
        -(diag + COLLISION_PENALTY * pairs)
    }

    /// Packs the constructor arguments into 20 little-endian bytes for
    /// container metadata; [`EnvSpec::from_meta_bytes`] inverts it exactly.
    pub fn meta_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(20);
        b.extend_from_slice(&(self.n_agents as u32).to_le_bytes());
        b.extend_from_slice(&self.episode_cap.to_le_bytes());
        b.extend_from_slice(&self.gamma.to_le_bytes());
        b.extend_from_slice(&self.sensing_radius.to_le_bytes());
        b
    }

    pub fn from_meta_bytes(bytes: &[u8]) -> Option<EnvSpec> {
        if bytes.len() != 20 {
            return None;
        }
        let n_agents = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let cap = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let gamma = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let rho = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
        if n_agents == 0 || n_agents > 64 || !(0.0..1.0).contains(&gamma) || !rho.is_finite() {
            return None;
        }
        Some(EnvSpec::particle(n_agents, cap, gamma, rho))
    }

    /// Stable identity over every field, for dataset/checkpoint validation.
    pub fn hash(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update((self.n_agents as u32).to_le_bytes());
        hasher.update((self.state_dim as u32).to_le_bytes());
        hasher.update((self.obs_dim as u32).to_le_bytes());
        hasher.update((self.action_dim as u32).to_le_bytes());
        hasher.update(self.episode_cap.to_le_bytes());
        hasher.update(self.gamma.to_le_bytes());
        hasher.update(self.sensing_radius.to_le_bytes());
        let digest = hasher.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }
}

/// Live episode state. The rng stream is consumed at reset; particle
/// dynamics themselves are deterministic.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub s: Vec<f32>,
    pub step: u32,
    rng: ChaCha12Rng,
}

pub type JointObservation = Vec<Vec<f32>>;

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: EnvState,
    pub obs: JointObservation,
    pub reward: f32,
    pub done: bool,
    /// True when any action component was outside [−1, 1] and got clipped.
    pub clipped: bool,
}

fn positions(spec: &EnvSpec, s: &[f32]) -> Vec<(f32, f32)> {
    (0..spec.n_agents).map(|i| (s[2 * i], s[2 * i + 1])).collect()
}

fn landmark(spec: &EnvSpec, s: &[f32], i: usize) -> (f32, f32) {
    let base = 4 * spec.n_agents;
    (s[base + 2 * i], s[base + 2 * i + 1])
}

/// Deterministic initial state: positions and landmarks uniform on the init
/// square, velocities zero, step counter zero.
pub fn reset(spec: &EnvSpec, seed: u64) -> (EnvState, JointObservation) {
    let mut rng = derive_rng(seed, "env/reset");
    let n = spec.n_agents;
    let mut s = vec![0.0f32; spec.state_dim];
    for i in 0..2 * n {
        s[i] = rng.random_range(-INIT_RANGE..INIT_RANGE);
    }
    for i in 0..2 * n {
        s[4 * n + i] = rng.random_range(-INIT_RANGE..INIT_RANGE);
    }
    let state = EnvState { s, step: 0, rng };
    let obs = observe_all(spec, &state);
    (state, obs)
}

/// Shared reward: −(mean distance of each agent to its landmark) minus the
/// collision penalty per agent pair closer than [`COLLISION_RADIUS`].
pub fn reward(spec: &EnvSpec, s: &[f32]) -> f32 {
    let pos = positions(spec, s);
    let n = spec.n_agents;
    let mut dist_sum = 0.0f32;
    for (i, &(px, py)) in pos.iter().enumerate() {
        let (lx, ly) = landmark(spec, s, i);
        dist_sum += ((px - lx) * (px - lx) + (py - ly) * (py - ly)).sqrt();
    }
    let mut penalty = 0.0f32;
    for i in 0..n {
        for j in i + 1..n {
            let (dx, dy) = (pos[i].0 - pos[j].0, pos[i].1 - pos[j].1);
            if (dx * dx + dy * dy).sqrt() < COLLISION_RADIUS {
                penalty += COLLISION_PENALTY;
            }
        }
    }
    -(dist_sum / n as f32) - penalty
}

/// Advances one step: per agent, velocity = clipped action, position
/// integrates velocity (clamped to the arena). Fully deterministic given
/// state and action; out-of-box actions are clipped and flagged.
pub fn step(spec: &EnvSpec, state: &EnvState, joint_action: &[Vec<f32>]) -> StepOutcome {
    assert_eq!(joint_action.len(), spec.n_agents, "need one action per agent");
    let n = spec.n_agents;
    let mut s = state.s.clone();
    let mut clipped = false;
    for (i, a) in joint_action.iter().enumerate() {
        assert_eq!(a.len(), spec.action_dim, "agent {i}: bad action width");
        let ax = a[0].clamp(-1.0, 1.0);
        let ay = a[1].clamp(-1.0, 1.0);
        if ax != a[0] || ay != a[1] {
            clipped = true;
        }
        s[2 * n + 2 * i] = ax;
        s[2 * n + 2 * i + 1] = ay;
        s[2 * i] = (s[2 * i] + ax * DT).clamp(-ARENA, ARENA);
        s[2 * i + 1] = (s[2 * i + 1] + ay * DT).clamp(-ARENA, ARENA);
    }
    let r = reward(spec, &s);
    let step_count = state.step + 1;
    let done = step_count >= spec.episode_cap;
    let next = EnvState { s, step: step_count, rng: state.rng.clone() };
    let obs = observe_all(spec, &next);
    StepOutcome { state: next, obs, reward: r, done, clipped }
}

/// Agent-centric view: own position, own velocity, offset to own landmark,
/// then offsets to every other agent in index order, zeroed beyond the
/// sensing radius.
pub fn observe(spec: &EnvSpec, state: &EnvState, agent: usize) -> Vec<f32> {
    assert!(agent < spec.n_agents, "agent index {agent} out of range");
    let n = spec.n_agents;
    let s = &state.s;
    let (px, py) = (s[2 * agent], s[2 * agent + 1]);
    let mut o = Vec::with_capacity(spec.obs_dim);
    o.push(px);
    o.push(py);
    o.push(s[2 * n + 2 * agent]);
    o.push(s[2 * n + 2 * agent + 1]);
    let (lx, ly) = landmark(spec, s, agent);
    o.push(lx - px);
    o.push(ly - py);
    for j in 0..n {
        if j == agent {
            continue;
        }
        let (dx, dy) = (s[2 * j] - px, s[2 * j + 1] - py);
        if (dx * dx + dy * dy).sqrt() <= spec.sensing_radius {
            o.push(dx);
            o.push(dy);
        } else {
            o.push(0.0);
            o.push(0.0);
        }
    }
    o
}

pub fn observe_all(spec: &EnvSpec, state: &EnvState) -> JointObservation {
    (0..spec.n_agents).map(|i| observe(spec, state, i)).collect()
}
