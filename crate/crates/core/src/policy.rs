//! Conservative multi-agent Q-learning on mixed real/synthetic batches.
//!
//! One central Q-network scores (global state, joint action); per-agent
//! tanh-squashed policies act on local observations. The Q-network trains on
//! a conservative objective: a regularizer that pushes Q down on policy
//! actions and up on dataset actions, plus the Bellman error against a
//! Polyak-averaged target copy. Policies ascend Q under a behavior-cloning
//! pull toward dataset actions. Synthetic data enters through the rollout
//! buffer, either confidence-weighted or uniform with uncertainty-penalized
//! rewards, and an optional MPC mode trains the policies toward the best of
//! k world-model-scored candidate actions.
//!
//! Q-graph input leaves: `in/state`, `in/act_data`, `in/act_pi`,
//! `in/target`. Policy-graph input leaves: `in/state`, `in/bc_coef`, per
//! agent `in/obs{i}`, `in/act{i}`, and in MPC mode `in/amax{i}`; the
//! Q-weights appear in the policy graph as fixed inputs.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::dataset::{Batch, Dataset};
use crate::env::{self, EnvSpec};
use crate::io::{self, IoError, TensorFile, TAG_POLICY};
use crate::nn::{MlpDef, ParamStore};
use crate::rng::{derive_rng, derive_seed};
use crate::rollout::{
    generate_rollouts, mixed_minibatch, mixed_minibatch_uniform, RolloutConfig, RolloutPolicy,
    SyntheticBuffer,
};
use crate::stats;
use crate::tensor::{AdamState, Array, Bindings, NodeId, TapeGraph, TensorError};
use crate::world::{hcat, WorldModelBundle};

/// Training aborts when any loss value exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("policy training diverged at step {step} (loss {loss:.3e})")]
    Diverged { step: usize, loss: f64, log: Box<PolicyLog> },
    #[error("synthetic data or MPC requested without a world model")]
    MissingWorldModel,
    #[error("world model carries no calibrated clip constant; pass an override")]
    MissingClip,
    #[error("policy checkpoint is missing `{0}`")]
    BadCheckpoint(String),
    #[error("unreadable env spec metadata in checkpoint")]
    BadMeta,
}

/// Where the synthetic half of each minibatch comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticMode {
    /// Real data only; the conservative backbone on its own.
    Off,
    /// Confidence-weighted draws from the rollout buffer.
    Weighted,
    /// Uniform draws with rewards replaced by r − lambda_pen·u.
    RewardPenalty { lambda_pen: f64 },
}

#[derive(Debug, Clone)]
pub struct PolicyConfig {
    pub steps: usize,
    /// Minibatch rows; must be even (half real, half synthetic).
    pub batch: usize,
    pub q_lr: f64,
    pub pi_lr: f64,
    /// Hidden width of the Q-network and every policy network.
    pub hidden: usize,
    /// Conservative regularizer weight.
    pub alpha: f64,
    /// Behavior-cloning weight, scaled by mean |Q| each step.
    pub lambda_bc: f64,
    /// Polyak rate for the target Q copy.
    pub tau: f64,
    pub synthetic: SyntheticMode,
    pub rollout_horizon: usize,
    pub rollout_starts: usize,
    pub rollout_noise: f64,
    /// Priority clip constant; falls back to the world model's calibrated
    /// value when unset.
    pub clip_override: Option<f64>,
    /// Buffer regeneration cadence in gradient steps.
    pub refresh_every: usize,
    /// Evaluation cadence in gradient steps; 0 disables evaluation.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Train policies toward the best of `mpc_k` world-model-scored
    /// candidates instead of plain Q-ascent targets.
    pub mpc: bool,
    pub mpc_k: usize,
    pub mpc_sigma: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            steps: 2000,
            batch: 32,
            q_lr: 3e-4,
            pi_lr: 3e-4,
            hidden: 128,
            alpha: 1.0,
            lambda_bc: 2.5,
            tau: 0.005,
            synthetic: SyntheticMode::Weighted,
            rollout_horizon: 15,
            rollout_starts: 100,
            rollout_noise: 0.1,
            clip_override: None,
            refresh_every: 1000,
            eval_every: 500,
            eval_episodes: 5,
            mpc: false,
            mpc_k: 3,
            mpc_sigma: 0.1,
            seed: 0,
        }
    }
}

struct PolicyDefs {
    q: MlpDef,
    pis: Vec<MlpDef>,
}

fn make_defs(spec: &EnvSpec, hidden: usize) -> PolicyDefs {
    let (n, od, ad, sd) = (spec.n_agents, spec.obs_dim, spec.action_dim, spec.state_dim);
    let h = hidden;
    PolicyDefs {
        q: MlpDef::new("q", &[sd + n * ad, h, h, 1], false),
        pis: (0..n).map(|i| MlpDef::new(&format!("pi{i}"), &[od, h, h, ad], true)).collect(),
    }
}

/// Central Q-network plus per-agent policies and the lagged target Q copy.
#[derive(Debug, Clone)]
pub struct PolicyBundle {
    pub spec: EnvSpec,
    pub hidden: usize,
    /// Online Q and policy weights.
    pub params: ParamStore,
    /// Polyak-averaged copy of the Q weights, used for Bellman targets.
    pub target: ParamStore,
    pub alpha: f64,
    pub lambda_bc: f64,
    pub tau: f64,
}

impl PolicyBundle {
    pub fn new(
        spec: EnvSpec,
        hidden: usize,
        alpha: f64,
        lambda_bc: f64,
        tau: f64,
        seed: u64,
    ) -> Self {
        let defs = make_defs(&spec, hidden);
        let mut params = ParamStore::new();
        let mut rng = derive_rng(seed, "policy/init");
        defs.q.init(&mut params, &mut rng);
        for pi in &defs.pis {
            pi.init(&mut params, &mut rng);
        }
        let mut target = ParamStore::new();
        for name in defs.q.param_names() {
            target.insert(&name, params.get(&name).unwrap().clone());
        }
        PolicyBundle { spec, hidden, params, target, alpha, lambda_bc, tau }
    }

    fn defs(&self) -> PolicyDefs {
        make_defs(&self.spec, self.hidden)
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Deterministic per-agent actions for one joint observation.
    pub fn act(&self, obs: &[Vec<f32>]) -> Vec<Vec<f32>> {
        let defs = self.defs();
        obs.iter()
            .zip(&defs.pis)
            .map(|(o, pi)| {
                let x: Vec<f64> = o.iter().map(|&v| v as f64).collect();
                pi.forward1(&self.params, &x).iter().map(|&v| v as f32).collect()
            })
            .collect()
    }

    /// Q values for one store (online or target) over `[B, state]` and
    /// `[B, joint action]` rows.
    fn q_batch(&self, store: &ParamStore, state: &Array, joint_action: &Array) -> Vec<f64> {
        let x = hcat(state, joint_action);
        self.defs().q.forward_batch(store, &x).data().to_vec()
    }

    /// Per-agent policy means as `[B, action_dim]` arrays.
    pub(crate) fn pi_batch(&self, obs: &[Array]) -> Vec<Array> {
        let defs = self.defs();
        obs.iter().zip(&defs.pis).map(|(o, pi)| pi.forward_batch(&self.params, o)).collect()
    }

    /// Moves the target Q weights toward the online weights by `tau`.
    fn polyak_step(&mut self, q_names: &[String]) {
        for name in q_names {
            let online = self.params.get(name).unwrap().clone();
            let t = self.target.bindings_mut().get_mut(name).unwrap();
            for (tv, ov) in t.data_mut().iter_mut().zip(online.data()) {
                *tv = (1.0 - self.tau) * *tv + self.tau * ov;
            }
        }
    }
}

impl RolloutPolicy for PolicyBundle {
    fn act_batch(&self, obs: &[Array]) -> Vec<Array> {
        self.pi_batch(obs)
    }
}

/// In-place Polyak update: target ← (1−tau)·target + tau·online for each
/// named parameter.
pub fn polyak_update(target: &mut ParamStore, online: &ParamStore, names: &[String], tau: f64) {
    for name in names {
        let o = online.get(name).unwrap_or_else(|| panic!("missing online param {name}"));
        let t = target
            .bindings_mut()
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing target param {name}"));
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = (1.0 - tau) * *tv + tau * ov;
        }
    }
}

/// Per-row TD targets r + γ·(1−done)·Q̄(s', π(o')) using the target Q and
/// the current policies; plain forwards, no gradient.
pub fn bellman_target(bundle: &PolicyBundle, batch: &Batch) -> Vec<f64> {
    let next_acts = bundle.pi_batch(&batch.next_obs);
    let joint = join_actions(&next_acts);
    let q = bundle.q_batch(&bundle.target, &batch.next_state, &joint);
    let gamma = bundle.spec.gamma;
    (0..batch.rows)
        .map(|r| {
            let done = batch.done.data()[r];
            batch.reward.data()[r] + gamma * (1.0 - done) * q[r]
        })
        .collect()
}

pub(crate) fn join_actions(per_agent: &[Array]) -> Array {
    per_agent.iter().skip(1).fold(per_agent[0].clone(), |acc, a| hcat(&acc, a))
}

/// The Q objective tape: conservative gap plus Bellman error.
pub struct QGraph {
    pub graph: TapeGraph,
    pub loss: NodeId,
    pub regularizer: NodeId,
    pub bellman_mse: NodeId,
}

/// α·(mean Q(s, π(s)) − mean Q(s, a)) + ½·mean((Q(s,a) − y)²). Row count is
/// not baked in; the same graph serves any batch size.
pub fn build_q_graph(spec: &EnvSpec, hidden: usize, alpha: f64) -> QGraph {
    let defs = make_defs(spec, hidden);
    let mut g = TapeGraph::new();
    let state = g.input("in/state");
    let act_data = g.input("in/act_data");
    let act_pi = g.input("in/act_pi");
    let target = g.input("in/target");

    let x_data = g.concat(&[state, act_data]);
    let q_data = defs.q.build(&mut g, x_data);
    let x_pi = g.concat(&[state, act_pi]);
    let q_pi = defs.q.build(&mut g, x_pi);

    let mean_pi = g.mean(q_pi);
    let mean_data = g.mean(q_data);
    let gap = g.sub(mean_pi, mean_data);
    let regularizer = g.scale(gap, alpha);

    let diff = g.sub(q_data, target);
    let sq = g.mul(diff, diff);
    let mse = g.mean(sq);
    let bellman_mse = g.scale(mse, 0.5);

    let loss = g.add(regularizer, bellman_mse);
    g.set_output(loss);
    QGraph { graph: g, loss, regularizer, bellman_mse }
}

pub(crate) fn q_bindings(batch: &Batch, act_pi: &Array, targets: &[f64]) -> Bindings {
    let mut b = Bindings::new();
    b.insert("in/state".into(), batch.state.clone());
    b.insert("in/act_data".into(), batch.joint_action.clone());
    b.insert("in/act_pi".into(), act_pi.clone());
    b.insert(
        "in/target".into(),
        Array::from_vec(&[targets.len(), 1], targets.to_vec()).unwrap(),
    );
    b
}

/// Conservative Q loss on one batch; targets come from [`bellman_target`].
pub fn cql_q_loss(bundle: &PolicyBundle, batch: &Batch, alpha: f64) -> Result<f64, PolicyError> {
    let mut qg = build_q_graph(&bundle.spec, bundle.hidden, alpha);
    let act_pi = join_actions(&bundle.pi_batch(&batch.obs));
    let targets = bellman_target(bundle, batch);
    let binds = q_bindings(batch, &act_pi, &targets);
    Ok(qg.graph.forward(&[bundle.params.bindings(), &binds])?.scalar_value())
}

/// The policy objective tape: Q-ascent plus behavior cloning, with an
/// optional MPC imitation term.
pub struct PiGraph {
    pub graph: TapeGraph,
    pub loss: NodeId,
    pub q_term: NodeId,
    pub bc_term: NodeId,
    pub mpc_term: Option<NodeId>,
}

/// −mean Q(s, π(o)) + bc_coef·mean_agents mean_rows ‖π_i(o_i) − a_i‖², plus
/// in MPC mode mean_agents mean_rows ‖π_i(o_i) − a_max,i‖². The Q-network
/// weights enter as fixed inputs; row count is baked into the norm scaling.
pub fn build_pi_graph(spec: &EnvSpec, hidden: usize, rows: usize, mpc: bool) -> PiGraph {
    let defs = make_defs(spec, hidden);
    let n = spec.n_agents;
    let mut g = TapeGraph::new();
    let state = g.input("in/state");
    let per_row = 1.0 / (n as f64 * rows as f64);

    let mut acts = Vec::with_capacity(n);
    let mut bc_parts = Vec::with_capacity(n);
    for (i, pi) in defs.pis.iter().enumerate() {
        let o = g.input(&format!("in/obs{i}"));
        let a_data = g.input(&format!("in/act{i}"));
        let a = pi.build(&mut g, o);
        let d = g.sub(a, a_data);
        bc_parts.push(g.squared_l2(d));
        acts.push(a);
    }
    let joint = g.concat(&acts);
    let qin = g.concat(&[state, joint]);
    let q = defs.q.build_frozen(&mut g, qin);
    let mean_q = g.mean(q);
    let q_term = g.scale(mean_q, -1.0);

    let bc_sum = bc_parts.into_iter().reduce(|a, b| g.add(a, b)).unwrap();
    let bc_mean = g.scale(bc_sum, per_row);
    let coef = g.input("in/bc_coef");
    let bc_term = g.mul(bc_mean, coef);

    let mut loss = g.add(q_term, bc_term);
    let mpc_term = if mpc {
        let mut parts = Vec::with_capacity(n);
        for (i, &a) in acts.iter().enumerate() {
            let amax = g.input(&format!("in/amax{i}"));
            let d = g.sub(a, amax);
            parts.push(g.squared_l2(d));
        }
        let msum = parts.into_iter().reduce(|a, b| g.add(a, b)).unwrap();
        let mterm = g.scale(msum, per_row);
        loss = g.add(loss, mterm);
        Some(mterm)
    } else {
        None
    };
    g.set_output(loss);
    PiGraph { graph: g, loss, q_term, bc_term, mpc_term }
}

pub(crate) fn pi_bindings(batch: &Batch, bc_coef: f64) -> Bindings {
    let mut b = Bindings::new();
    b.insert("in/state".into(), batch.state.clone());
    b.insert("in/bc_coef".into(), Array::scalar(bc_coef));
    for (i, (o, a)) in batch.obs.iter().zip(&batch.actions).enumerate() {
        b.insert(format!("in/obs{i}"), o.clone());
        b.insert(format!("in/act{i}"), a.clone());
    }
    b
}

/// Policy loss with an explicit behavior-cloning multiplier. The trainer
/// passes lambda_bc·mean|Q|; callers probing the raw objective pass lambda
/// directly.
pub fn policy_loss(bundle: &PolicyBundle, batch: &Batch, lambda: f64) -> Result<f64, PolicyError> {
    let mut pg = build_pi_graph(&bundle.spec, bundle.hidden, batch.rows, false);
    let binds = pi_bindings(batch, lambda);
    Ok(pg.graph.forward(&[bundle.params.bindings(), &binds])?.scalar_value())
}

/// Policy loss plus the imitation pull toward per-agent `a_max` candidates.
pub fn mpc_policy_loss(
    bundle: &PolicyBundle,
    batch: &Batch,
    a_max: &[Array],
    lambda: f64,
) -> Result<f64, PolicyError> {
    let mut pg = build_pi_graph(&bundle.spec, bundle.hidden, batch.rows, true);
    let mut binds = pi_bindings(batch, lambda);
    for (i, a) in a_max.iter().enumerate() {
        binds.insert(format!("in/amax{i}"), a.clone());
    }
    Ok(pg.graph.forward(&[bundle.params.bindings(), &binds])?.scalar_value())
}

/// Outcome of one MPC candidate search over a batch of rows.
pub struct MpcSelection {
    /// Per-agent `[B, action_dim]` winning actions.
    pub actions: Vec<Array>,
    /// Winning candidate index per row.
    pub chosen: Vec<usize>,
    /// `scores[row][candidate]`; non-finite predictions score −∞.
    pub scores: Vec<Vec<f64>>,
}

/// Scores k candidate joint actions (the policy mean plus k−1 noisy
/// perturbations) one step through the world model by r' + γ·Q̄(ŝ', π(ô'))
/// and keeps the best per row, first index winning ties.
pub fn mpc_select_actions(
    bundle: &PolicyBundle,
    world: &WorldModelBundle,
    obs: &[Array],
    state: &Array,
    k: usize,
    sigma: f64,
    seed: u64,
) -> MpcSelection {
    assert!(k >= 1, "need at least one candidate");
    let n = bundle.spec.n_agents;
    let ad = bundle.spec.action_dim;
    let rows = state.row_view().0;
    let gamma = bundle.spec.gamma;
    let means = bundle.pi_batch(obs);

    let mut rng = derive_rng(seed, "mpc/noise");
    let candidates: Vec<Vec<Array>> = (0..k)
        .map(|c| {
            if c == 0 {
                return means.clone();
            }
            means
                .iter()
                .map(|m| {
                    let data: Vec<f64> = m
                        .data()
                        .iter()
                        .map(|&v| {
                            let e: f64 = rng.sample(StandardNormal);
                            (v + sigma * e).clamp(-1.0, 1.0)
                        })
                        .collect();
                    Array::from_vec(&[rows, ad], data).unwrap()
                })
                .collect()
        })
        .collect();

    let mut scores = vec![vec![f64::NEG_INFINITY; k]; rows];
    for (c, cand) in candidates.iter().enumerate() {
        let out = world.predict_batch(obs, cand, state);
        let next_acts = bundle.pi_batch(&out.obs_hat);
        let joint = join_actions(&next_acts);
        let q = bundle.q_batch(&bundle.target, &out.next_state, &joint);
        for r in 0..rows {
            if out.row_is_finite(r) && q[r].is_finite() {
                scores[r][c] = out.reward[r] + gamma * q[r];
            }
        }
    }

    let chosen: Vec<usize> = scores.iter().map(|row| stats::argmax(row)).collect();
    let actions: Vec<Array> = (0..n)
        .map(|i| {
            let mut data = Vec::with_capacity(rows * ad);
            for (r, &c) in chosen.iter().enumerate() {
                data.extend_from_slice(&candidates[c][i].data()[r * ad..][..ad]);
            }
            Array::from_vec(&[rows, ad], data).unwrap()
        })
        .collect();
    MpcSelection { actions, chosen, scores }
}

/// Single-observation convenience wrapper over [`mpc_select_actions`].
pub fn mpc_select_action(
    bundle: &PolicyBundle,
    world: &WorldModelBundle,
    obs: &[Vec<f32>],
    state: &[f32],
    k: usize,
    sigma: f64,
    seed: u64,
) -> Vec<Vec<f32>> {
    let od = bundle.spec.obs_dim;
    let obs_arrs: Vec<Array> = obs
        .iter()
        .map(|o| Array::from_vec(&[1, od], o.iter().map(|&v| v as f64).collect()).unwrap())
        .collect();
    let state_arr =
        Array::from_vec(&[1, state.len()], state.iter().map(|&v| v as f64).collect()).unwrap();
    let sel = mpc_select_actions(bundle, world, &obs_arrs, &state_arr, k, sigma, seed);
    sel.actions.iter().map(|a| a.data().iter().map(|&v| v as f32).collect()).collect()
}

/// Reward-penalty ablation arm: a copy of the buffer with synthetic rewards
/// replaced by r − lambda_pen·u. Sampling from this arm is uniform.
pub fn reward_penalty_baseline(buffer: &SyntheticBuffer, lambda_pen: f64) -> SyntheticBuffer {
    let transitions = buffer
        .transitions()
        .iter()
        .zip(buffer.uncertainties())
        .map(|(t, &u)| {
            let mut t = t.clone();
            t.reward = (t.reward as f64 - lambda_pen * u) as f32;
            t
        })
        .collect();
    let mut out = SyntheticBuffer::new();
    out.replace(transitions, buffer.step_indices().to_vec(), buffer.uncertainties().to_vec());
    out
}

/// Deterministic evaluation rollouts in the real environment.
pub struct EvalReport {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

/// Runs `episodes` noiseless episodes and reports undiscounted returns.
pub fn evaluate_policy(
    policy: &impl RolloutPolicy,
    spec: &EnvSpec,
    episodes: usize,
    seed: u64,
) -> EvalReport {
    assert!(episodes >= 1, "need at least one episode");
    assert!(spec.episode_cap >= 1, "episodes must be able to end");
    let od = spec.obs_dim;
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let (mut state, mut obs) = env::reset(spec, derive_seed(seed, &format!("eval/ep{ep}")));
        let mut total = 0.0f64;
        loop {
            let obs_arrs: Vec<Array> = obs
                .iter()
                .map(|o| {
                    Array::from_vec(&[1, od], o.iter().map(|&v| v as f64).collect()).unwrap()
                })
                .collect();
            let acts = policy.act_batch(&obs_arrs);
            let joint: Vec<Vec<f32>> =
                acts.iter().map(|a| a.data().iter().map(|&v| v as f32).collect()).collect();
            let out = env::step(spec, &state, &joint);
            total += out.reward as f64;
            state = out.state;
            obs = out.obs;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    EvalReport { mean: stats::mean(&returns), std: stats::std_pop(&returns), returns }
}

/// [`evaluate_policy`] for a trained bundle.
pub fn evaluate(bundle: &PolicyBundle, spec: &EnvSpec, episodes: usize, seed: u64) -> EvalReport {
    evaluate_policy(bundle, spec, episodes, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStepRow {
    pub step: usize,
    pub q_loss: f64,
    pub pi_loss: f64,
    /// The effective behavior-cloning multiplier lambda_bc·mean|Q|.
    pub bc_coef: f64,
    pub mean_abs_q: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyLog {
    pub steps: Vec<PolicyStepRow>,
    /// (step, mean evaluation return) at the configured cadence.
    pub evals: Vec<(usize, f64)>,
    /// (step, buffer size) at each synthetic refresh.
    pub refreshes: Vec<(usize, usize)>,
}

pub struct PolicyTrainOutput {
    pub bundle: PolicyBundle,
    pub log: PolicyLog,
    /// The synthetic buffer as of the last refresh; empty when disabled.
    pub buffer: SyntheticBuffer,
}

/// Alternating conservative Q and policy updates on mixed minibatches, with
/// Polyak target tracking, periodic buffer refreshes, and periodic
/// evaluation.
pub fn train_policy(
    d: &Dataset,
    world: Option<&WorldModelBundle>,
    cfg: &PolicyConfig,
) -> Result<PolicyTrainOutput, PolicyError> {
    assert!(cfg.batch >= 2 && cfg.batch % 2 == 0, "batch size must be even");
    assert!(!d.is_empty(), "need training data");
    let synthetic_on = cfg.synthetic != SyntheticMode::Off;
    if (synthetic_on || cfg.mpc) && world.is_none() {
        return Err(PolicyError::MissingWorldModel);
    }

    let spec = d.spec.clone();
    let mut bundle =
        PolicyBundle::new(spec.clone(), cfg.hidden, cfg.alpha, cfg.lambda_bc, cfg.tau, cfg.seed);
    let defs = bundle.defs();
    let q_names = defs.q.param_names();
    let pi_names: Vec<String> = defs.pis.iter().flat_map(|p| p.param_names()).collect();

    let mut log = PolicyLog::default();
    let mut buffer = SyntheticBuffer::new();
    if cfg.steps == 0 {
        return Ok(PolicyTrainOutput { bundle, log, buffer });
    }

    let mut qg = build_q_graph(&spec, cfg.hidden, cfg.alpha);
    let mut pg = build_pi_graph(&spec, cfg.hidden, cfg.batch, cfg.mpc);
    let mut adam_q = AdamState::new(cfg.q_lr, q_names.clone());
    let mut adam_pi = AdamState::new(cfg.pi_lr, pi_names);

    for step in 0..cfg.steps {
        if synthetic_on && step % cfg.refresh_every == 0 {
            let wm = world.unwrap();
            let c = cfg.clip_override.or(wm.c_clip).ok_or(PolicyError::MissingClip)?;
            let rcfg = RolloutConfig::new(
                cfg.rollout_horizon,
                cfg.rollout_starts,
                cfg.rollout_noise,
                c,
            );
            let epoch = step / cfg.refresh_every;
            buffer =
                generate_rollouts(wm, &bundle, d, &rcfg, derive_seed(cfg.seed, &format!("policy/refresh/{epoch}")));
            if let SyntheticMode::RewardPenalty { lambda_pen } = cfg.synthetic {
                buffer = reward_penalty_baseline(&buffer, lambda_pen);
            }
            log.refreshes.push((step, buffer.len()));
        }

        let step_seed = derive_seed(cfg.seed, &format!("policy/batch/{step}"));
        let mb = match cfg.synthetic {
            SyntheticMode::RewardPenalty { .. } => {
                mixed_minibatch_uniform(d, &buffer, cfg.batch, step_seed)
            }
            _ => mixed_minibatch(d, &buffer, cfg.batch, step_seed),
        };
        let batch = &mb.batch;

        let act_pi = join_actions(&bundle.pi_batch(&batch.obs));
        let targets = bellman_target(&bundle, batch);
        let qb = q_bindings(batch, &act_pi, &targets);
        let q_loss = qg.graph.forward(&[bundle.params.bindings(), &qb])?.scalar_value();
        if !q_loss.is_finite() || q_loss.abs() > DIVERGENCE_LIMIT {
            return Err(PolicyError::Diverged { step, loss: q_loss, log: Box::new(log) });
        }
        let q_grads = qg.graph.backward()?;
        adam_q.step(bundle.params.bindings_mut(), &q_grads)?;

        let q_vals = bundle.q_batch(&bundle.params, &batch.state, &batch.joint_action);
        let mean_abs_q = stats::mean(&q_vals.iter().map(|v| v.abs()).collect::<Vec<f64>>());
        let bc_coef = cfg.lambda_bc * mean_abs_q;
        let mut pb = pi_bindings(batch, bc_coef);
        if cfg.mpc {
            let sel = mpc_select_actions(
                &bundle,
                world.unwrap(),
                &batch.obs,
                &batch.state,
                cfg.mpc_k,
                cfg.mpc_sigma,
                derive_seed(cfg.seed, &format!("policy/mpc/{step}")),
            );
            for (i, a) in sel.actions.iter().enumerate() {
                pb.insert(format!("in/amax{i}"), a.clone());
            }
        }
        let pi_loss = pg.graph.forward(&[bundle.params.bindings(), &pb])?.scalar_value();
        if !pi_loss.is_finite() || pi_loss.abs() > DIVERGENCE_LIMIT {
            return Err(PolicyError::Diverged { step, loss: pi_loss, log: Box::new(log) });
        }
        let pi_grads = pg.graph.backward()?;
        adam_pi.step(bundle.params.bindings_mut(), &pi_grads)?;

        bundle.polyak_step(&q_names);
        log.steps.push(PolicyStepRow { step, q_loss, pi_loss, bc_coef, mean_abs_q });

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let rep = evaluate(
                &bundle,
                &spec,
                cfg.eval_episodes,
                derive_seed(cfg.seed, &format!("policy/eval/{step}")),
            );
            log.evals.push((step, rep.mean));
        }
    }
    if cfg.eval_every > 0 {
        let rep = evaluate(
            &bundle,
            &spec,
            cfg.eval_episodes,
            derive_seed(cfg.seed, &format!("policy/eval/{}", cfg.steps)),
        );
        log.evals.push((cfg.steps, rep.mean));
    }
    Ok(PolicyTrainOutput { bundle, log, buffer })
}

pub fn to_tensor_file(bundle: &PolicyBundle) -> TensorFile {
    let mut f = TensorFile::new(TAG_POLICY);
    f.push("meta/spec", &[20], io::bytes_as_f32s(&bundle.spec.meta_bytes()));
    f.push("meta/hidden", &[1], vec![bundle.hidden as f32]);
    f.push("meta/alpha", &[8], io::bytes_as_f32s(&bundle.alpha.to_le_bytes()));
    f.push("meta/lambda_bc", &[8], io::bytes_as_f32s(&bundle.lambda_bc.to_le_bytes()));
    f.push("meta/tau", &[8], io::bytes_as_f32s(&bundle.tau.to_le_bytes()));
    io::push_params(&mut f, "param/", &bundle.params);
    io::push_params(&mut f, "target/", &bundle.target);
    f
}

pub fn from_tensor_file(f: &TensorFile) -> Result<PolicyBundle, PolicyError> {
    f.expect_tag(TAG_POLICY)?;
    let meta = io::f32s_as_bytes(&f.get("meta/spec")?.data)?;
    let spec = EnvSpec::from_meta_bytes(&meta).ok_or(PolicyError::BadMeta)?;
    let hidden = f.get_scalar("meta/hidden")? as usize;
    let read_f64 = |name: &str| -> Result<f64, PolicyError> {
        let bytes = io::f32s_as_bytes(&f.get(name)?.data)?;
        Ok(f64::from_le_bytes(bytes.try_into().map_err(|_| PolicyError::BadMeta)?))
    };
    let alpha = read_f64("meta/alpha")?;
    let lambda_bc = read_f64("meta/lambda_bc")?;
    let tau = read_f64("meta/tau")?;

    let params = io::read_params(f, "param/")?;
    let target = io::read_params(f, "target/")?;
    let defs = make_defs(&spec, hidden);
    for name in defs.q.param_names() {
        if params.get(&name).is_none() {
            return Err(PolicyError::BadCheckpoint(name));
        }
        if target.get(&name).is_none() {
            return Err(PolicyError::BadCheckpoint(format!("target/{name}")));
        }
    }
    for pi in &defs.pis {
        for name in pi.param_names() {
            if params.get(&name).is_none() {
                return Err(PolicyError::BadCheckpoint(name));
            }
        }
    }
    Ok(PolicyBundle { spec, hidden, params, target, alpha, lambda_bc, tau })
}

pub fn save(bundle: &PolicyBundle, path: &Path) -> Result<(), PolicyError> {
    to_tensor_file(bundle).save(path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolicyBundle, PolicyError> {
    let f = TensorFile::load(path)?;
    from_tensor_file(&f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{collect, make_batch, Tier, Transition};
    use crate::tensor::finite_diff_check;

    fn spec2() -> EnvSpec {
        EnvSpec::particle(2, 25, 0.99, 1.0)
    }

    fn small_bundle(spec: &EnvSpec, seed: u64) -> PolicyBundle {
        PolicyBundle::new(spec.clone(), 8, 1.0, 2.5, 0.005, seed)
    }

    fn zeroed(mut bundle: PolicyBundle) -> PolicyBundle {
        let names: Vec<String> = bundle.params.names().cloned().collect();
        for name in &names {
            let z = Array::zeros(bundle.params.get(name).unwrap().shape());
            bundle.params.insert(name, z);
        }
        let names: Vec<String> = bundle.target.names().cloned().collect();
        for name in &names {
            let z = Array::zeros(bundle.target.get(name).unwrap().shape());
            bundle.target.insert(name, z);
        }
        bundle
    }

    fn medium_batch(spec: &EnvSpec, rows: usize) -> Batch {
        let ds = collect(spec, Tier::Medium, 1, 11);
        let refs: Vec<&Transition> = ds.transitions.iter().take(rows).collect();
        make_batch(spec, &refs)
    }

    #[test]
    fn bellman_targets_follow_reward_and_constant_q() {
        let spec = spec2();
        let mut bundle = zeroed(small_bundle(&spec, 0));
        let c = 0.7;
        bundle.target.insert("q/b2", Array::from_vec(&[1], vec![c]).unwrap());

        let ds = collect(&spec, Tier::Medium, 1, 11);
        let refs: Vec<&Transition> = ds.transitions.iter().collect();
        let batch = make_batch(&spec, &refs);
        let targets = bellman_target(&bundle, &batch);
        for r in 0..batch.rows {
            let done = batch.done.data()[r];
            let expect = batch.reward.data()[r] + spec.gamma * (1.0 - done) * c;
            assert_eq!(targets[r], expect, "row {r}");
        }
        // The final transition of the episode is terminal: target is r alone.
        let last = batch.rows - 1;
        assert_eq!(batch.done.data()[last], 1.0);
        assert_eq!(targets[last], batch.reward.data()[last]);
    }

    #[test]
    fn bellman_targets_reduce_to_reward_at_gamma_zero() {
        let spec = EnvSpec::particle(2, 25, 0.0, 1.0);
        let bundle = small_bundle(&spec, 1);
        let batch = medium_batch(&spec, 6);
        let targets = bellman_target(&bundle, &batch);
        assert_eq!(targets, batch.reward.data().to_vec());
    }

    #[test]
    fn q_loss_with_alpha_zero_is_the_bellman_mse() {
        let spec = spec2();
        let bundle = small_bundle(&spec, 2);
        let batch = medium_batch(&spec, 5);
        let loss = cql_q_loss(&bundle, &batch, 0.0).unwrap();

        let q = bundle.q_batch(&bundle.params, &batch.state, &batch.joint_action);
        let y = bellman_target(&bundle, &batch);
        let manual =
            0.5 * stats::mean(&q.iter().zip(&y).map(|(qv, yv)| (qv - yv) * (qv - yv)).collect::<Vec<f64>>());
        assert_eq!(loss, manual);
    }

    #[test]
    fn constant_q_cancels_the_conservative_gap() {
        let spec = spec2();
        let mut bundle = zeroed(small_bundle(&spec, 3));
        bundle.params.insert("q/b2", Array::from_vec(&[1], vec![0.7]).unwrap());
        let batch = medium_batch(&spec, 5);
        let with_reg = cql_q_loss(&bundle, &batch, 5.0).unwrap();
        let without = cql_q_loss(&bundle, &batch, 0.0).unwrap();
        assert_eq!(with_reg, without);
    }

    #[test]
    fn q_loss_passes_a_finite_difference_check() {
        let spec = spec2();
        let mut bundle = small_bundle(&spec, 4);
        let batch = medium_batch(&spec, 3);
        let act_pi = join_actions(&bundle.pi_batch(&batch.obs));
        let targets = bellman_target(&bundle, &batch);

        let mut qg = build_q_graph(&spec, bundle.hidden, 1.0);
        let binds = q_bindings(&batch, &act_pi, &targets);
        let err =
            finite_diff_check(&mut qg.graph, bundle.params.bindings_mut(), &binds, 1e-4).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn policy_loss_passes_a_finite_difference_check() {
        let spec = spec2();
        let mut bundle = small_bundle(&spec, 5);
        let batch = medium_batch(&spec, 3);
        let mut pg = build_pi_graph(&spec, bundle.hidden, batch.rows, false);
        let binds = pi_bindings(&batch, 0.8);
        let err =
            finite_diff_check(&mut pg.graph, bundle.params.bindings_mut(), &binds, 1e-4).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn mpc_loss_passes_a_finite_difference_check() {
        let spec = spec2();
        let mut bundle = small_bundle(&spec, 6);
        let batch = medium_batch(&spec, 3);
        let mut pg = build_pi_graph(&spec, bundle.hidden, batch.rows, true);
        let mut binds = pi_bindings(&batch, 0.8);
        for i in 0..spec.n_agents {
            binds.insert(format!("in/amax{i}"), batch.actions[i].clone());
        }
        let err =
            finite_diff_check(&mut pg.graph, bundle.params.bindings_mut(), &binds, 1e-4).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn policy_gradients_do_not_reach_the_q_network() {
        let spec = spec2();
        let bundle = small_bundle(&spec, 7);
        let batch = medium_batch(&spec, 4);
        let mut pg = build_pi_graph(&spec, bundle.hidden, batch.rows, false);
        let binds = pi_bindings(&batch, 1.0);
        pg.graph.forward(&[bundle.params.bindings(), &binds]).unwrap();
        let grads = pg.graph.backward().unwrap();
        assert!(grads.keys().all(|k| k.starts_with("pi")), "unexpected grads: {:?}", grads.keys());
        assert_eq!(grads.len(), 2 * 6);
    }

    #[test]
    fn matching_actions_zero_the_cloning_term() {
        let spec = spec2();
        let bundle = zeroed(small_bundle(&spec, 8));
        // Zero policies emit zero actions; a zero-action batch makes the
        // cloning residual vanish, so lambda stops mattering.
        let ds = collect(&spec, Tier::Medium, 1, 11);
        let mut t = ds.transitions[0].clone();
        t.actions = vec![vec![0.0; spec.action_dim]; spec.n_agents];
        let batch = make_batch(&spec, &[&t, &t]);
        let high = policy_loss(&bundle, &batch, 123.0).unwrap();
        let none = policy_loss(&bundle, &batch, 0.0).unwrap();
        assert_eq!(high, none);
    }

    #[test]
    fn huge_lambda_gradient_aligns_with_pure_cloning() {
        let spec = spec2();
        let bundle = small_bundle(&spec, 9);
        let batch = medium_batch(&spec, 4);
        let grad_at = |lambda: f64| -> Vec<f64> {
            let mut pg = build_pi_graph(&spec, bundle.hidden, batch.rows, false);
            let binds = pi_bindings(&batch, lambda);
            pg.graph.forward(&[bundle.params.bindings(), &binds]).unwrap();
            let g = pg.graph.backward().unwrap();
            g.values().flat_map(|a| a.data().iter().copied()).collect()
        };
        let g0 = grad_at(0.0);
        let g1 = grad_at(1.0);
        let bc: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
        let huge = grad_at(1e6);
        let dot: f64 = huge.iter().zip(&bc).map(|(a, b)| a * b).sum();
        let cos = dot
            / (huge.iter().map(|v| v * v).sum::<f64>().sqrt()
                * bc.iter().map(|v| v * v).sum::<f64>().sqrt());
        assert!(cos > 0.99, "cosine {cos}");
    }

    #[test]
    fn polyak_tracks_the_scalar_closed_form() {
        let mut target = ParamStore::new();
        target.insert("x", Array::scalar(0.0));
        let mut online = ParamStore::new();
        online.insert("x", Array::scalar(1.0));
        let names = vec!["x".to_string()];
        let tau = 0.1;
        for _ in 0..10 {
            polyak_update(&mut target, &online, &names, tau);
        }
        let expect = 1.0 - 0.9f64.powi(10);
        assert!((target.get("x").unwrap().scalar_value() - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_return_the_initialized_bundle() {
        let spec = spec2();
        let d = collect(&spec, Tier::Medium, 2, 12);
        let cfg = PolicyConfig {
            steps: 0,
            hidden: 8,
            synthetic: SyntheticMode::Off,
            eval_every: 0,
            seed: 13,
            ..PolicyConfig::default()
        };
        let out = train_policy(&d, None, &cfg).unwrap();
        let fresh = PolicyBundle::new(spec, 8, cfg.alpha, cfg.lambda_bc, cfg.tau, 13);
        assert_eq!(out.bundle.params.bindings(), fresh.params.bindings());
        assert!(out.log.steps.is_empty());
        assert!(out.buffer.is_empty());
    }

    #[test]
    fn disabled_buffer_matches_the_plain_backbone_bitwise() {
        let spec = spec2();
        let d = collect(&spec, Tier::Medium, 2, 12);
        let wm = WorldModelBundle::new(spec.clone(), 8, 4, 1);
        let cfg = PolicyConfig {
            steps: 20,
            batch: 8,
            hidden: 8,
            synthetic: SyntheticMode::Off,
            eval_every: 0,
            seed: 5,
            ..PolicyConfig::default()
        };
        let without = train_policy(&d, None, &cfg).unwrap();
        let with = train_policy(&d, Some(&wm), &cfg).unwrap();
        assert_eq!(without.bundle.params.bindings(), with.bundle.params.bindings());
        assert_eq!(without.bundle.target.bindings(), with.bundle.target.bindings());
        assert_eq!(without.log, with.log);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let spec = spec2();
        let d = collect(&spec, Tier::Medium, 2, 12);
        let cfg = PolicyConfig {
            steps: 15,
            batch: 8,
            hidden: 8,
            synthetic: SyntheticMode::Off,
            eval_every: 0,
            seed: 6,
            ..PolicyConfig::default()
        };
        let a = train_policy(&d, None, &cfg).unwrap();
        let b = train_policy(&d, None, &cfg).unwrap();
        assert_eq!(a.bundle.params.bindings(), b.bundle.params.bindings());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn training_with_synthetic_data_refreshes_on_schedule() {
        let spec = spec2();
        let d = collect(&spec, Tier::Medium, 2, 12);
        let mut wm = WorldModelBundle::new(spec.clone(), 8, 4, 2);
        wm.c_clip = Some(1.0);
        let cfg = PolicyConfig {
            steps: 24,
            batch: 8,
            hidden: 8,
            synthetic: SyntheticMode::Weighted,
            rollout_horizon: 3,
            rollout_starts: 5,
            refresh_every: 10,
            eval_every: 0,
            seed: 7,
            ..PolicyConfig::default()
        };
        let out = train_policy(&d, Some(&wm), &cfg).unwrap();
        let steps: Vec<usize> = out.log.refreshes.iter().map(|&(s, _)| s).collect();
        assert_eq!(steps, vec![0, 10, 20]);
        assert!(out.log.refreshes.iter().all(|&(_, len)| len == 15));
        assert_eq!(out.buffer.len(), 15);
        assert_eq!(out.log.steps.len(), 24);
    }

    #[test]
    fn missing_world_model_is_rejected() {
        let spec = spec2();
        let d = collect(&spec, Tier::Medium, 1, 12);
        let cfg = PolicyConfig { hidden: 8, ..PolicyConfig::default() };
        assert!(matches!(train_policy(&d, None, &cfg), Err(PolicyError::MissingWorldModel)));
    }

    #[test]
    fn mpc_with_one_candidate_returns_the_policy_means() {
        let spec = spec2();
        let bundle = small_bundle(&spec, 10);
        let wm = WorldModelBundle::new(spec.clone(), 8, 4, 3);
        let batch = medium_batch(&spec, 4);
        let sel = mpc_select_actions(&bundle, &wm, &batch.obs, &batch.state, 1, 0.1, 0);
        let means = bundle.pi_batch(&batch.obs);
        assert_eq!(sel.actions, means);
        assert!(sel.chosen.iter().all(|&c| c == 0));
    }

    #[test]
    fn mpc_ties_break_toward_the_first_candidate() {
        let spec = spec2();
        let bundle = zeroed(small_bundle(&spec, 11));
        // A zeroed world model predicts the same outcome for every action,
        // so all candidate scores tie and the mean action must win.
        let mut wm = WorldModelBundle::new(spec.clone(), 8, 4, 4);
        let names: Vec<String> = wm.params.names().cloned().collect();
        for name in &names {
            let z = Array::zeros(wm.params.get(name).unwrap().shape());
            wm.params.insert(name, z);
        }
        let batch = medium_batch(&spec, 3);
        let sel = mpc_select_actions(&bundle, &wm, &batch.obs, &batch.state, 3, 0.1, 9);
        assert!(sel.chosen.iter().all(|&c| c == 0));
        for row in &sel.scores {
            assert!(row.iter().all(|&s| s == row[0]));
        }
    }

    #[test]
    fn mpc_choice_dominates_every_rejected_candidate() {
        let spec = spec2();
        let bundle = small_bundle(&spec, 12);
        let wm = WorldModelBundle::new(spec.clone(), 8, 4, 5);
        let batch = medium_batch(&spec, 6);
        let sel = mpc_select_actions(&bundle, &wm, &batch.obs, &batch.state, 3, 0.2, 10);
        for (r, row) in sel.scores.iter().enumerate() {
            for &s in row {
                assert!(sel.scores[r][sel.chosen[r]] >= s);
            }
        }
        let chosen_mean =
            stats::mean(&sel.scores.iter().zip(&sel.chosen).map(|(row, &c)| row[c]).collect::<Vec<f64>>());
        let mean_of_means = stats::mean(&sel.scores.iter().map(|row| row[0]).collect::<Vec<f64>>());
        assert!(chosen_mean >= mean_of_means);
    }

    #[test]
    fn mpc_loss_reduces_to_policy_loss_when_amax_is_the_policy() {
        let spec = spec2();
        let bundle = zeroed(small_bundle(&spec, 13));
        let batch = medium_batch(&spec, 4);
        let zeros: Vec<Array> =
            (0..spec.n_agents).map(|_| Array::zeros(&[batch.rows, spec.action_dim])).collect();
        let plain = policy_loss(&bundle, &batch, 1.5).unwrap();
        let mpc = mpc_policy_loss(&bundle, &batch, &zeros, 1.5).unwrap();
        assert_eq!(mpc, plain);
    }

    #[test]
    fn reward_penalty_rewrites_only_uncertain_rewards() {
        let spec = spec2();
        let ds = collect(&spec, Tier::Medium, 1, 14);
        let mut buf = SyntheticBuffer::new();
        for (i, t) in ds.transitions.iter().take(2).enumerate() {
            let mut t = t.clone();
            t.priority = Some(1.0);
            buf.push(t, 0, [0.0, 2.0][i]);
        }
        let same = reward_penalty_baseline(&buf, 0.0);
        assert_eq!(same.transitions(), buf.transitions());
        let shifted = reward_penalty_baseline(&buf, 1.0);
        assert_eq!(shifted.transitions()[0].reward, buf.transitions()[0].reward);
        assert_eq!(shifted.transitions()[1].reward, buf.transitions()[1].reward - 2.0);
    }

    #[test]
    fn zero_policy_return_matches_the_standstill_oracle() {
        let spec = spec2();
        let bundle = zeroed(small_bundle(&spec, 14));
        let episodes = 4;
        let rep = evaluate(&bundle, &spec, episodes, 21);
        for (ep, &got) in rep.returns.iter().enumerate() {
            // Independent oracle: with zero actions nothing moves, so every
            // step pays the reset state's mean landmark distance plus any
            // standing collision penalty.
            let (state, _) = env::reset(&spec, derive_seed(21, &format!("eval/ep{ep}")));
            let n = spec.n_agents;
            let mut dist = 0.0f64;
            for i in 0..n {
                let (px, py) = (state.s[2 * i] as f64, state.s[2 * i + 1] as f64);
                let (lx, ly) =
                    (state.s[4 * n + 2 * i] as f64, state.s[4 * n + 2 * i + 1] as f64);
                dist += ((px - lx).powi(2) + (py - ly).powi(2)).sqrt();
            }
            let mut penalty = 0.0f64;
            for i in 0..n {
                for j in i + 1..n {
                    let dx = (state.s[2 * i] - state.s[2 * j]) as f64;
                    let dy = (state.s[2 * i + 1] - state.s[2 * j + 1]) as f64;
                    if (dx * dx + dy * dy).sqrt() < env::COLLISION_RADIUS as f64 {
                        penalty += env::COLLISION_PENALTY as f64;
                    }
                }
            }
            let per_step = -(dist / n as f64) - penalty;
            let expect = per_step * spec.episode_cap as f64;
            assert!((got - expect).abs() < 1e-4, "episode {ep}: {got} vs {expect}");
        }
    }

    #[test]
    fn evaluation_is_seed_deterministic() {
        let spec = spec2();
        let bundle = small_bundle(&spec, 15);
        let a = evaluate(&bundle, &spec, 3, 33);
        let b = evaluate(&bundle, &spec, 3, 33);
        assert_eq!(a.returns, b.returns);
        let c = evaluate(&bundle, &spec, 3, 34);
        assert_ne!(a.returns, c.returns);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.logo");
        let bundle = small_bundle(&spec2(), 16);
        save(&bundle, &path).unwrap();
        let loaded = load(&path).unwrap();
        // Payloads are f32; loading must land exactly on the rounded values.
        for (name, orig) in bundle.params.bindings() {
            let got = loaded.params.get(name).unwrap();
            for (&g, &o) in got.data().iter().zip(orig.data()) {
                assert_eq!(g, o as f32 as f64);
            }
        }
        for (name, orig) in bundle.target.bindings() {
            let got = loaded.target.get(name).unwrap();
            for (&g, &o) in got.data().iter().zip(orig.data()) {
                assert_eq!(g, o as f32 as f64);
            }
        }
        assert_eq!(loaded.alpha, bundle.alpha);
        assert_eq!(loaded.lambda_bc, bundle.lambda_bc);
        assert_eq!(loaded.tau, bundle.tau);
        let bytes = std::fs::read(&path).unwrap();
        save(&loaded, &path).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
    }

    #[test]
    fn checkpoint_with_missing_parameter_is_rejected() {
        let bundle = small_bundle(&spec2(), 17);
        let mut f = to_tensor_file(&bundle);
        f.entries.retain(|e| e.name != "param/pi0/w1");
        let err = from_tensor_file(&f).unwrap_err();
        assert!(matches!(err, PolicyError::BadCheckpoint(name) if name == "pi0/w1"));

        let mut f = to_tensor_file(&bundle);
        f.entries.retain(|e| e.name != "target/q/b0");
        let err = from_tensor_file(&f).unwrap_err();
        assert!(matches!(err, PolicyError::BadCheckpoint(name) if name == "target/q/b0"));
    }
}
