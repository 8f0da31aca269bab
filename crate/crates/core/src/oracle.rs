//! Independent verification machinery: exact tabular value iteration, the
//! estimation-error bound check, budget-matched baseline world models for
//! ablation comparisons, and a PCA projector for feature visualization.
//!
//! Nothing here feeds the training pipeline; these exist to check it. The
//! bound check runs on enumerable MDPs whose Lipschitz constants are
//! measured, not assumed: states embed onto the integer line with unit
//! spacing, and reward/Q functions extend to the whole line by piecewise
//! linear interpolation, which preserves the measured constants exactly.

use std::time::{Duration, Instant};

use rand::Rng;
use thiserror::Error;

use crate::dataset::{make_batch, Dataset, Transition};
use crate::env::tabular::TabularMDP;
use crate::env::EnvSpec;
use crate::nn::{gaussian_nodes, width_for_budget, MlpDef, ParamStore};
use crate::rng::{derive_rng, derive_seed};
use crate::tensor::{AdamState, Array, Bindings, TapeGraph, TensorError};
use crate::world::{hcat, WorldModelBundle, DIVERGENCE_LIMIT};

/// Fixed-point tolerance used wherever a check needs the optimal Q table.
pub const VI_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dataset is empty: {0}")]
    EmptyDataset(&'static str),
    #[error("baseline training diverged at step {step}: loss {loss:e}")]
    Diverged { step: usize, loss: f64 },
}

/// Converged action values of a finite MDP.
#[derive(Debug, Clone)]
pub struct QTable {
    values: Vec<f64>,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub tol: f64,
}

impl QTable {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn v(&self, s: usize) -> f64 {
        (0..self.n_actions).map(|a| self.q(s, a)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sup-norm distance between the table and its own Bellman backup.
    pub fn bellman_residual(&self, mdp: &TabularMDP) -> f64 {
        let mut worst = 0.0f64;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let backup = backup(mdp, &self.values, s, a);
                worst = worst.max((self.q(s, a) - backup).abs());
            }
        }
        worst
    }
}

fn backup(mdp: &TabularMDP, q: &[f64], s: usize, a: usize) -> f64 {
    let na = mdp.n_actions;
    let exp: f64 = mdp
        .p(s, a)
        .iter()
        .enumerate()
        .map(|(sp, &p)| {
            if p == 0.0 {
                return 0.0;
            }
            let v = q[sp * na..][..na].iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            p * v
        })
        .sum();
    mdp.r(s, a) + mdp.gamma * exp
}

/// Iterates the Bellman backup from zero until the contraction argument
/// puts the table within `tol` of the fixed point in sup norm: stop once a
/// step moves less than tol·(1−γ)/γ. γ < 1 guarantees termination, and the
/// returned table's Bellman residual is below (1−γ)·tol < tol.
pub fn value_iteration(mdp: &TabularMDP, tol: f64) -> QTable {
    assert!(tol > 0.0, "tolerance must be positive");
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let threshold = if mdp.gamma > 0.0 { tol * (1.0 - mdp.gamma) / mdp.gamma } else { tol };
    let mut q = vec![0.0f64; ns * na];
    loop {
        let mut next = vec![0.0f64; ns * na];
        let mut diff = 0.0f64;
        for s in 0..ns {
            for a in 0..na {
                let v = backup(mdp, &q, s, a);
                diff = diff.max((v - q[s * na + a]).abs());
                next[s * na + a] = v;
            }
        }
        q = next;
        if diff < threshold {
            return QTable { values: q, n_states: ns, n_actions: na, gamma: mdp.gamma, tol };
        }
    }
}

/// Perturbation magnitudes for the bound check, together with the measured
/// Lipschitz constants of the MDP they will be applied to.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorInjection {
    pub eps_s: f64,
    pub eps_r: f64,
    pub eps_q: f64,
    /// Largest adjacent difference of the state-reward function on the
    /// integer-line embedding.
    pub l_r: f64,
    /// Largest adjacent difference of any action's optimal Q column.
    pub l_q: f64,
}

impl ErrorInjection {
    /// Measures the constants from the state-reward table and the optimal Q
    /// table. Adjacent differences are exact Lipschitz constants on the
    /// line: any two points are spanned by unit steps.
    pub fn compute(rho: &[f64], q: &QTable, eps_s: f64, eps_r: f64, eps_q: f64) -> Self {
        assert!(eps_s >= 0.0 && eps_r >= 0.0 && eps_q >= 0.0, "magnitudes must be non-negative");
        assert_eq!(rho.len(), q.n_states);
        let l_r = (1..rho.len()).map(|i| (rho[i] - rho[i - 1]).abs()).fold(0.0, f64::max);
        let mut l_q = 0.0f64;
        for a in 0..q.n_actions {
            for s in 1..q.n_states {
                l_q = l_q.max((q.q(s, a) - q.q(s - 1, a)).abs());
            }
        }
        ErrorInjection { eps_s, eps_r, eps_q, l_r, l_q }
    }

    /// The guaranteed ceiling on one-step backup error:
    /// (L_r + γ·L_Q)·ε_s + ε_r + γ·ε_Q.
    pub fn bound(&self, gamma: f64) -> f64 {
        (self.l_r + gamma * self.l_q) * self.eps_s + self.eps_r + gamma * self.eps_q
    }
}

/// Deterministic MDP whose reward depends only on the successor: action `a`
/// from state `s` jumps to a fixed random state, paying that state's value
/// from a random potential table. Built this way, both Lipschitz constants
/// are measurable and the reward inherits successor-state error, which is
/// exactly the structure the bound's (L_r·ε_s) term prices in.
pub fn successor_reward_mdp(
    n_states: usize,
    n_actions: usize,
    seed: u64,
    gamma: f64,
) -> (TabularMDP, Vec<f64>) {
    let mut rng = derive_rng(seed, "oracle/successor_mdp");
    let rho: Vec<f64> = (0..n_states).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut trans = vec![0.0; n_states * n_actions * n_states];
    let mut rewards = vec![0.0; n_states * n_actions];
    for s in 0..n_states {
        for a in 0..n_actions {
            let succ = rng.random_range(0..n_states);
            trans[(s * n_actions + a) * n_states + succ] = 1.0;
            rewards[s * n_actions + a] = rho[succ];
        }
    }
    let mdp = TabularMDP::new(n_states, n_actions, trans, rewards, gamma)
        .expect("construction is valid");
    (mdp, rho)
}

/// Piecewise-linear extension of a table to the segment [0, len−1]. Exact
/// at grid points, so zero displacement reproduces table values bitwise.
fn interp(f: &[f64], x: f64) -> f64 {
    let i = x.floor() as usize;
    if i + 1 >= f.len() {
        return f[f.len() - 1];
    }
    let t = x - i as f64;
    if t == 0.0 {
        return f[i];
    }
    f[i] + t * (f[i + 1] - f[i])
}

#[derive(Debug, Clone)]
pub struct Theorem1Report {
    pub bound: f64,
    /// Largest |Q̂* − Q*| over all trials and state-action pairs.
    pub max_error: f64,
    pub trials: usize,
    pub violations: usize,
    pub pass: bool,
}

/// Runs `trials` random injections against the bound. Per trial and per
/// (s, a): the deterministic successor is displaced along the line within
/// ε_s, the reward is read off the displaced position within ε_r, the
/// bootstrapped value is read off the displaced position within ε_Q, and
/// the perturbed one-step backup is compared to the exact one. The bound is
/// a guarantee; any violation is an implementation bug, not noise.
///
/// Requires an MDP from [`successor_reward_mdp`] (deterministic rows,
/// rewards equal to the successor's `rho` entry) and an injection computed
/// from this MDP's tables.
pub fn theorem1_check(
    mdp: &TabularMDP,
    rho: &[f64],
    inj: &ErrorInjection,
    trials: usize,
    seed: u64,
) -> Theorem1Report {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    assert_eq!(rho.len(), ns);
    let mut succ = vec![0usize; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let row = mdp.p(s, a);
            let sp = row.iter().position(|&p| p == 1.0).expect("rows must be deterministic");
            assert_eq!(mdp.r(s, a), rho[sp], "rewards must be successor-determined");
            succ[s * na + a] = sp;
        }
    }
    let q = value_iteration(mdp, VI_TOL);
    let q_cols: Vec<Vec<f64>> =
        (0..na).map(|a| (0..ns).map(|s| q.q(s, a)).collect()).collect();
    let bound = inj.bound(mdp.gamma);

    let mut rng = derive_rng(seed, "oracle/theorem1");
    let mut draw = |eps: f64| -> f64 {
        if eps == 0.0 {
            return 0.0;
        }
        let d = rng.random_range(-eps..=eps);
        assert!(d.abs() <= eps, "injection exceeded its own bound");
        d
    };

    let mut max_error = 0.0f64;
    let mut violations = 0usize;
    for _ in 0..trials {
        let mut trial_error = 0.0f64;
        for s in 0..ns {
            for a in 0..na {
                let sp = succ[s * na + a];
                let x = (sp as f64 + draw(inj.eps_s)).clamp(0.0, (ns - 1) as f64);
                let r_hat = interp(rho, x) + draw(inj.eps_r);
                let v_hat = q_cols
                    .iter()
                    .map(|col| interp(col, x))
                    .fold(f64::NEG_INFINITY, f64::max)
                    + draw(inj.eps_q);
                let q_hat = r_hat + mdp.gamma * v_hat;
                let q_ref = rho[sp] + mdp.gamma * q.v(sp);
                trial_error = trial_error.max((q_hat - q_ref).abs());
            }
        }
        max_error = max_error.max(trial_error);
        if trial_error > bound {
            violations += 1;
        }
    }
    Theorem1Report { bound, max_error, trials, violations, pass: violations == 0 }
}

/// Single network predicting a Gaussian over the next global state from
/// (state, joint action); the flat-prediction ablation arm.
#[derive(Debug, Clone)]
pub struct DirectModel {
    pub spec: EnvSpec,
    pub width: usize,
    pub params: ParamStore,
}

fn direct_def(spec: &EnvSpec, width: usize) -> MlpDef {
    let ind = spec.state_dim + spec.n_agents * spec.action_dim;
    MlpDef::new("direct", &[ind, width, width, 2 * spec.state_dim], false)
}

/// Widest direct model that stays within `budget` scalar parameters; used
/// to match a trained bundle's size before comparing prediction errors.
pub fn direct_width_for(spec: &EnvSpec, budget: usize) -> usize {
    width_for_budget(spec.state_dim + spec.n_agents * spec.action_dim, 2 * spec.state_dim, budget)
}

impl DirectModel {
    pub fn new(spec: EnvSpec, width: usize, seed: u64) -> Self {
        let def = direct_def(&spec, width);
        let mut params = ParamStore::new();
        def.init(&mut params, &mut derive_rng(seed, "direct/init"));
        DirectModel { spec, width, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Mean next-state prediction for `[B, state]` and `[B, joint action]`.
    pub fn predict_batch(&self, state: &Array, joint_action: &Array) -> Array {
        let sd = self.spec.state_dim;
        let x = hcat(state, joint_action);
        let head = direct_def(&self.spec, self.width).forward_batch(&self.params, &x);
        let rows = head.row_view().0;
        let mut mean = Vec::with_capacity(rows * sd);
        for r in 0..rows {
            mean.extend_from_slice(&head.data()[r * 2 * sd..][..sd]);
        }
        Array::from_vec(&[rows, sd], mean).unwrap()
    }
}

/// Mean over transitions of ‖predicted next state − true next state‖²/dim,
/// the same statistic the bundle trainer logs on validation data.
pub fn direct_state_mse(model: &DirectModel, ds: &Dataset) -> Result<f64, OracleError> {
    if ds.is_empty() {
        return Err(OracleError::EmptyDataset("validation"));
    }
    let sd = model.spec.state_dim;
    let mut total = 0.0;
    for chunk in ds.transitions.chunks(512) {
        let refs: Vec<&Transition> = chunk.iter().collect();
        let batch = make_batch(&model.spec, &refs);
        let pred = model.predict_batch(&batch.state, &batch.joint_action);
        for (r, t) in chunk.iter().enumerate() {
            total += pred.data()[r * sd..][..sd]
                .iter()
                .zip(&t.next_state)
                .map(|(p, s)| (p - *s as f64) * (p - *s as f64))
                .sum::<f64>()
                / sd as f64;
        }
    }
    Ok(total / ds.len() as f64)
}

#[derive(Debug, Clone)]
pub struct DirectConfig {
    pub steps: usize,
    /// Minibatch rows, sampled uniformly with replacement. A value at or
    /// above the training set size switches to full-batch steps.
    pub batch: usize,
    pub lr: f64,
    pub width: usize,
    pub seed: u64,
}

impl Default for DirectConfig {
    fn default() -> Self {
        DirectConfig { steps: 2000, batch: 32, lr: 1e-3, width: 128, seed: 0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DirectLog {
    /// (step, negative log-likelihood).
    pub steps: Vec<(usize, f64)>,
}

pub struct DirectTrainOutput {
    pub model: DirectModel,
    pub log: DirectLog,
    /// Held-out one-step state MSE after the final step.
    pub val_mse: f64,
}

/// Adam on the Gaussian negative log-likelihood of the next state; the
/// minibatch schedule mirrors the bundle trainer so size-matched
/// comparisons differ only in the model.
pub fn train_direct_model(
    train: &Dataset,
    val: &Dataset,
    cfg: &DirectConfig,
) -> Result<DirectTrainOutput, OracleError> {
    if train.is_empty() {
        return Err(OracleError::EmptyDataset("train"));
    }
    if val.is_empty() {
        return Err(OracleError::EmptyDataset("validation"));
    }
    let spec = train.spec.clone();
    let mut model = DirectModel::new(spec.clone(), cfg.width, derive_seed(cfg.seed, "direct/init"));
    let mut log = DirectLog::default();
    if cfg.steps > 0 {
        let def = direct_def(&spec, cfg.width);
        let mut g = TapeGraph::new();
        let state = g.input("in/state");
        let action = g.input("in/joint_action");
        let next_state = g.input("in/next_state");
        let x = g.concat(&[state, action]);
        let head = def.build(&mut g, x);
        let (mean, log_std) = gaussian_nodes(&mut g, head, spec.state_dim);
        let nll = g.gauss_nll(mean, log_std, next_state);
        g.set_output(nll);
        let mut adam = AdamState::new(cfg.lr, g.trainable_leaf_names());

        let rows = cfg.batch.min(train.len());
        let full_batch = rows == train.len();
        let mut batch_rng = derive_rng(cfg.seed, "direct/batch");
        for step in 0..cfg.steps {
            let idx: Vec<usize> = if full_batch {
                (0..rows).collect()
            } else {
                (0..rows).map(|_| batch_rng.random_range(0..train.len())).collect()
            };
            let refs: Vec<&Transition> = idx.iter().map(|&i| &train.transitions[i]).collect();
            let batch = make_batch(&spec, &refs);
            let mut inputs = Bindings::new();
            inputs.insert("in/state".into(), batch.state);
            inputs.insert("in/joint_action".into(), batch.joint_action);
            inputs.insert("in/next_state".into(), batch.next_state);
            let loss = g.forward(&[model.params.bindings(), &inputs])?.scalar_value();
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                return Err(OracleError::Diverged { step, loss });
            }
            log.steps.push((step, loss));
            let grads = g.backward()?;
            adam.step(model.params.bindings_mut(), &grads)?;
        }
    }
    let val_mse = direct_state_mse(&model, val)?;
    Ok(DirectTrainOutput { model, log, val_mse })
}

/// Bag of independently trained direct models; prediction is the member
/// mean and uncertainty the member spread.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub members: Vec<DirectModel>,
}

impl EnsembleModel {
    /// Per-entry member mean and population standard deviation.
    pub fn predict_batch(&self, state: &Array, joint_action: &Array) -> (Array, Array) {
        assert!(!self.members.is_empty());
        let preds: Vec<Array> =
            self.members.iter().map(|m| m.predict_batch(state, joint_action)).collect();
        let k = preds.len() as f64;
        let shape = preds[0].shape().to_vec();
        let len = preds[0].data().len();
        let mut mean = vec![0.0f64; len];
        for p in &preds {
            for (m, v) in mean.iter_mut().zip(p.data()) {
                *m += v / k;
            }
        }
        // Pairwise form of the population variance, so identical members
        // yield an exact zero instead of centering-roundoff dust.
        let mut var = vec![0.0f64; len];
        for a in &preds {
            for b in &preds {
                for ((s, va), vb) in var.iter_mut().zip(a.data()).zip(b.data()) {
                    *s += (va - vb) * (va - vb) / (2.0 * k * k);
                }
            }
        }
        let std = var.into_iter().map(f64::sqrt).collect();
        (Array::from_vec(&shape, mean).unwrap(), Array::from_vec(&shape, std).unwrap())
    }
}

pub struct EnsembleTrainOutput {
    pub ensemble: EnsembleModel,
    pub val_mse: f64,
}

/// Trains `k` members with independent initializations and minibatch
/// streams, then scores the member-mean prediction on held-out data.
pub fn train_ensemble(
    train: &Dataset,
    val: &Dataset,
    cfg: &DirectConfig,
    k: usize,
) -> Result<EnsembleTrainOutput, OracleError> {
    assert!(k >= 1, "need at least one member");
    let mut members = Vec::with_capacity(k);
    for j in 0..k {
        let member_cfg =
            DirectConfig { seed: derive_seed(cfg.seed, &format!("ensemble/member{j}")), ..cfg.clone() };
        members.push(train_direct_model(train, val, &member_cfg)?.model);
    }
    let ensemble = EnsembleModel { members };

    let sd = train.spec.state_dim;
    let mut total = 0.0;
    for chunk in val.transitions.chunks(512) {
        let refs: Vec<&Transition> = chunk.iter().collect();
        let batch = make_batch(&train.spec, &refs);
        let (pred, _) = ensemble.predict_batch(&batch.state, &batch.joint_action);
        for (r, t) in chunk.iter().enumerate() {
            total += pred.data()[r * sd..][..sd]
                .iter()
                .zip(&t.next_state)
                .map(|(p, s)| (p - *s as f64) * (p - *s as f64))
                .sum::<f64>()
                / sd as f64;
        }
    }
    Ok(EnsembleTrainOutput { ensemble, val_mse: total / val.len() as f64 })
}

fn rollout_starts(d: &Dataset, trajectories: usize) -> Vec<&Transition> {
    assert!(!d.is_empty());
    (0..trajectories).map(|i| &d.transitions[i % d.len()]).collect()
}

fn random_actions(spec: &EnvSpec, rows: usize, steps: usize, seed: u64) -> Vec<Array> {
    let mut rng = derive_rng(seed, "oracle/timing_actions");
    let width = spec.n_agents * spec.action_dim;
    (0..steps)
        .map(|_| {
            let data = (0..rows * width).map(|_| rng.random_range(-1.0..1.0)).collect();
            Array::from_vec(&[rows, width], data).unwrap()
        })
        .collect()
}

fn median_duration(mut reps: Vec<Duration>) -> Duration {
    reps.sort();
    reps[reps.len() / 2]
}

/// Wall-clock for the bundle to roll `trajectories` parallel trajectories
/// `steps` steps forward (median of `reps` runs, actions pre-generated).
pub fn time_bundle_rollout(
    bundle: &WorldModelBundle,
    d: &Dataset,
    trajectories: usize,
    steps: usize,
    reps: usize,
    seed: u64,
) -> Duration {
    assert!(reps >= 1);
    let spec = &bundle.spec;
    let starts = rollout_starts(d, trajectories);
    let batch = make_batch(spec, &starts);
    let actions = random_actions(spec, trajectories, steps, seed);
    let per_agent: Vec<Vec<Array>> = actions
        .iter()
        .map(|joint| {
            (0..spec.n_agents)
                .map(|i| {
                    let ad = spec.action_dim;
                    let mut data = Vec::with_capacity(trajectories * ad);
                    for r in 0..trajectories {
                        data.extend_from_slice(
                            &joint.data()[r * spec.n_agents * ad + i * ad..][..ad],
                        );
                    }
                    Array::from_vec(&[trajectories, ad], data).unwrap()
                })
                .collect()
        })
        .collect();

    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut state = batch.state.clone();
        let mut obs = batch.obs.clone();
        let start = Instant::now();
        for acts in &per_agent {
            let out = bundle.predict_batch(&obs, acts, &state);
            state = out.next_state;
            obs = out.obs_hat;
        }
        times.push(start.elapsed());
    }
    median_duration(times)
}

/// Wall-clock for the ensemble on the same workload as
/// [`time_bundle_rollout`].
pub fn time_ensemble_rollout(
    ensemble: &EnsembleModel,
    d: &Dataset,
    trajectories: usize,
    steps: usize,
    reps: usize,
    seed: u64,
) -> Duration {
    assert!(reps >= 1);
    let spec = &ensemble.members[0].spec;
    let starts = rollout_starts(d, trajectories);
    let batch = make_batch(spec, &starts);
    let actions = random_actions(spec, trajectories, steps, seed);

    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut state = batch.state.clone();
        let start = Instant::now();
        for joint in &actions {
            let (mean, _) = ensemble.predict_batch(&state, joint);
            state = mean;
        }
        times.push(start.elapsed());
    }
    median_duration(times)
}

#[derive(Debug, Clone)]
pub struct PcaResult {
    /// Row-per-point coordinates in the retained component basis.
    pub projected: Vec<Vec<f64>>,
    /// Retained principal directions, unit length, mutually orthogonal.
    pub components: Vec<Vec<f64>>,
    /// Fraction of total variance captured per retained component.
    pub explained: Vec<f64>,
    /// Set when the data supported fewer than the requested components.
    pub rank_deficient: bool,
}

const PCA_POWER_TOL: f64 = 1e-9;
const PCA_POWER_CAP: usize = 10_000;
/// Eigenvalues below this fraction of total variance end the extraction.
const PCA_RANK_EPS: f64 = 1e-12;

/// Mean-centered projection onto the top-k principal directions, extracted
/// by power iteration with deflation on the covariance matrix.
pub fn pca_project(points: &[Vec<f64>], k: usize) -> PcaResult {
    assert!(k >= 1, "need at least one component");
    assert!(points.len() >= k + 1, "need at least k+1 points");
    let dim = points[0].len();
    assert!(points.iter().all(|p| p.len() == dim), "points must share a dimension");
    assert!(k <= dim, "cannot extract more components than dimensions");

    let n = points.len() as f64;
    let mut center = vec![0.0f64; dim];
    for p in points {
        for (c, v) in center.iter_mut().zip(p) {
            *c += v / n;
        }
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&center).map(|(v, c)| v - c).collect())
        .collect();
    let mut cov = vec![0.0f64; dim * dim];
    for p in &centered {
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += p[i] * p[j] / n;
            }
        }
    }
    let total: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    let mut rank_deficient = false;
    for c in 0..k {
        match power_iterate(&cov, dim, c as u64, total) {
            Some((lambda, v)) => {
                explained.push(lambda / total);
                for i in 0..dim {
                    for j in 0..dim {
                        cov[i * dim + j] -= lambda * v[i] * v[j];
                    }
                }
                components.push(v);
            }
            None => {
                rank_deficient = true;
                break;
            }
        }
    }
    let projected = centered
        .iter()
        .map(|p| components.iter().map(|v| p.iter().zip(v).map(|(a, b)| a * b).sum()).collect())
        .collect();
    PcaResult { projected, components, explained, rank_deficient }
}

/// Leading eigenpair of a symmetric PSD matrix, or None when the remaining
/// spectrum is negligible against the original total variance.
fn power_iterate(cov: &[f64], dim: usize, index: u64, total: f64) -> Option<(f64, Vec<f64>)> {
    if total <= 0.0 {
        return None;
    }
    let mut rng = derive_rng(index, "oracle/pca_power");
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    for x in v.iter_mut() {
        *x /= nv;
    }
    for _ in 0..PCA_POWER_CAP {
        let mut w = vec![0.0f64; dim];
        for i in 0..dim {
            for j in 0..dim {
                w[i] += cov[i * dim + j] * v[j];
            }
        }
        let nw = norm(&w);
        if nw <= PCA_RANK_EPS * total {
            return None;
        }
        for x in w.iter_mut() {
            *x /= nw;
        }
        let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = w;
        if delta < PCA_POWER_TOL {
            break;
        }
    }
    let mut cv = vec![0.0f64; dim];
    for i in 0..dim {
        for j in 0..dim {
            cv[i] += cov[i * dim + j] * v[j];
        }
    }
    let lambda: f64 = cv.iter().zip(&v).map(|(a, b)| a * b).sum();
    if lambda <= PCA_RANK_EPS * total {
        return None;
    }
    Some((lambda, v))
}
