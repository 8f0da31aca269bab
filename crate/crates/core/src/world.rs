//! The local-to-global world model.
//!
//! Per agent, a predictive model encodes the global state and the agent's
//! observation-action pair into features, emits a Gaussian over the agent's
//! next observation, reconstructs the observation-action input from a sample
//! of that Gaussian, and carries an auxiliary Gaussian head over the global
//! (next state, reward). A single deductive model encodes (next state,
//! reward) into a Gaussian over the joint next observation and decodes joint
//! observations back to (next state, reward). At inference the per-agent
//! predicted observations are concatenated and decoded into the global next
//! state and reward; the gap between that deduced state and the auxiliary
//! heads' state is the uncertainty score `u` attached to synthetic data.
//!
//! Training minimizes the sum of four losses (predictive, deductive,
//! deduction regularizer, auxiliary head), all built on one tape so the sum
//! is exact and every component shares the same reparameterized samples.
//!
//! Graph input leaves: `in/state`, `in/state_reward`, `in/joint_next_obs`,
//! and per agent `in/obs{i}`, `in/act{i}`, `in/next_obs{i}`, `in/noise_p{i}`,
//! plus `in/noise_d` for the deductive sample.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::dataset::{make_batch, Batch, Dataset};
use crate::env::EnvSpec;
use crate::io::{self, IoError, TensorFile, TAG_WORLD};
use crate::nn::{gaussian_nodes, MlpDef, ParamStore};
use crate::rng::{derive_rng, derive_seed};
use crate::tensor::{AdamState, Array, Bindings, NodeId, TapeGraph, TensorError};

/// Training aborts when any loss value exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dataset is empty: {0}")]
    EmptyDataset(&'static str),
    #[error("training diverged at step {step}: loss {loss:e}")]
    Diverged { step: usize, loss: f64, log: Box<WorldLog> },
    #[error("checkpoint is missing parameter `{0}`")]
    BadCheckpoint(String),
    #[error("unreadable env spec metadata in checkpoint")]
    BadMeta,
    #[error("non-finite prediction for inputs {detail}")]
    NonFinitePrediction { detail: String },
}

#[derive(Debug, Clone)]
pub struct WorldModelConfig {
    pub steps: usize,
    /// Minibatch rows, sampled uniformly with replacement. A value at or
    /// above the training set size switches to full-batch steps.
    pub batch: usize,
    pub lr: f64,
    /// Hidden layer width of every encoder/decoder.
    pub hidden: usize,
    /// Width of the state and observation-action feature vectors.
    pub feature: usize,
    /// Validation state MSE cadence (also logged at step 0 and at the end).
    pub val_every: usize,
    pub seed: u64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        WorldModelConfig {
            steps: 2000,
            batch: 32,
            lr: 1e-3,
            hidden: 128,
            feature: 64,
            val_every: 100,
            seed: 0,
        }
    }
}

struct AgentDefs {
    state_feat: MlpDef,
    oa_feat: MlpDef,
    obs_head: MlpDef,
    recon: MlpDef,
    aux_head: MlpDef,
}

struct WorldDefs {
    agents: Vec<AgentDefs>,
    joint_enc: MlpDef,
    state_dec: MlpDef,
}

fn make_defs(spec: &EnvSpec, hidden: usize, feature: usize) -> WorldDefs {
    let (n, od, ad, sd) = (spec.n_agents, spec.obs_dim, spec.action_dim, spec.state_dim);
    let h = hidden;
    let agents = (0..n)
        .map(|i| AgentDefs {
            state_feat: MlpDef::new(&format!("p{i}/state_feat"), &[sd, h, h, feature], false),
            oa_feat: MlpDef::new(&format!("p{i}/oa_feat"), &[od + ad, h, h, feature], false),
            obs_head: MlpDef::new(&format!("p{i}/obs_head"), &[2 * feature, h, h, 2 * od], false),
            recon: MlpDef::new(&format!("p{i}/recon"), &[od, h, h, od + ad], false),
            aux_head: MlpDef::new(
                &format!("p{i}/aux_head"),
                &[2 * feature, h, h, 2 * (sd + 1)],
                false,
            ),
        })
        .collect();
    WorldDefs {
        agents,
        joint_enc: MlpDef::new("ded/obs_head", &[sd + 1, h, h, 2 * n * od], false),
        state_dec: MlpDef::new("ded/state_dec", &[n * od, h, h, sd + 1], false),
    }
}

/// Trained (or freshly initialized) model: parameter store plus the sizes
/// needed to rebuild its networks. `c_clip` is the priority clipping
/// constant calibrated on validation data after training.
#[derive(Debug, Clone)]
pub struct WorldModelBundle {
    pub spec: EnvSpec,
    pub hidden: usize,
    pub feature: usize,
    pub params: ParamStore,
    pub c_clip: Option<f64>,
}

impl WorldModelBundle {
    pub fn new(spec: EnvSpec, hidden: usize, feature: usize, seed: u64) -> Self {
        let defs = make_defs(&spec, hidden, feature);
        let mut params = ParamStore::new();
        let mut rng = derive_rng(seed, "wm/init");
        for a in &defs.agents {
            a.state_feat.init(&mut params, &mut rng);
            a.oa_feat.init(&mut params, &mut rng);
            a.obs_head.init(&mut params, &mut rng);
            a.recon.init(&mut params, &mut rng);
            a.aux_head.init(&mut params, &mut rng);
        }
        defs.joint_enc.init(&mut params, &mut rng);
        defs.state_dec.init(&mut params, &mut rng);
        WorldModelBundle { spec, hidden, feature, params, c_clip: None }
    }

    fn defs(&self) -> WorldDefs {
        make_defs(&self.spec, self.hidden, self.feature)
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Mean-mode batch inference: per-agent predicted next observations,
    /// their deduced (next state, reward), the auxiliary heads' averaged
    /// (state, reward), and the path discrepancy `u` per row.
    pub fn predict_batch(&self, obs: &[Array], actions: &[Array], state: &Array) -> PredictOut {
        let defs = self.defs();
        let (n, od, sd) = (self.spec.n_agents, self.spec.obs_dim, self.spec.state_dim);
        assert_eq!(obs.len(), n);
        assert_eq!(actions.len(), n);
        let rows = state.row_view().0;

        let mut obs_hat = Vec::with_capacity(n);
        let mut aux_sum = vec![0.0f64; rows * (sd + 1)];
        for i in 0..n {
            let a = &defs.agents[i];
            let hs = a.state_feat.forward_batch(&self.params, state);
            let oa = hcat(&obs[i], &actions[i]);
            let hoa = a.oa_feat.forward_batch(&self.params, &oa);
            let feat = hcat(&hs, &hoa);
            let head = a.obs_head.forward_batch(&self.params, &feat);
            obs_hat.push(col_slice(&head, 0, od));
            let aux = a.aux_head.forward_batch(&self.params, &feat);
            let aux_mean = col_slice(&aux, 0, sd + 1);
            for (s, v) in aux_sum.iter_mut().zip(aux_mean.data()) {
                *s += v / n as f64;
            }
        }
        let joint: Array = obs_hat.iter().fold(None::<Array>, |acc, o| match acc {
            None => Some(o.clone()),
            Some(a) => Some(hcat(&a, o)),
        })
        .unwrap();
        let deduced = defs.state_dec.forward_batch(&self.params, &joint);

        let mut next_state = Vec::with_capacity(rows * sd);
        let mut reward = Vec::with_capacity(rows);
        let mut aux_state = Vec::with_capacity(rows * sd);
        let mut aux_reward = Vec::with_capacity(rows);
        let mut u = Vec::with_capacity(rows);
        for r in 0..rows {
            let ded_row = &deduced.data()[r * (sd + 1)..][..sd + 1];
            let aux_row = &aux_sum[r * (sd + 1)..][..sd + 1];
            next_state.extend_from_slice(&ded_row[..sd]);
            reward.push(ded_row[sd]);
            aux_state.extend_from_slice(&aux_row[..sd]);
            aux_reward.push(aux_row[sd]);
            let d2: f64 = ded_row[..sd]
                .iter()
                .zip(&aux_row[..sd])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            u.push(d2.sqrt());
        }
        PredictOut {
            next_state: Array::from_vec(&[rows, sd], next_state).unwrap(),
            reward,
            u,
            obs_hat,
            aux_state: Array::from_vec(&[rows, sd], aux_state).unwrap(),
            aux_reward,
        }
    }

    pub fn predict_from_batch(&self, batch: &Batch) -> PredictOut {
        self.predict_batch(&batch.obs, &batch.actions, &batch.state)
    }
}

/// Mean-mode inference output; everything is `[rows, ·]` or per-row.
pub struct PredictOut {
    pub next_state: Array,
    pub reward: Vec<f64>,
    pub u: Vec<f64>,
    /// Per-agent predicted next observations.
    pub obs_hat: Vec<Array>,
    pub aux_state: Array,
    pub aux_reward: Vec<f64>,
}

impl PredictOut {
    pub fn rows(&self) -> usize {
        self.reward.len()
    }

    pub fn row_is_finite(&self, r: usize) -> bool {
        let sd = self.next_state.shape()[1];
        let state_ok = self.next_state.data()[r * sd..][..sd].iter().all(|v| v.is_finite());
        let obs_ok = self.obs_hat.iter().all(|o| {
            let od = o.shape()[1];
            o.data()[r * od..][..od].iter().all(|v| v.is_finite())
        });
        state_ok && obs_ok && self.reward[r].is_finite() && self.u[r].is_finite()
    }
}

/// Single-transition prediction in environment precision.
pub struct Prediction {
    pub next_state: Vec<f32>,
    pub reward: f32,
    pub u: f64,
    pub obs_hat: Vec<Vec<f32>>,
}

pub fn predict_next(
    bundle: &WorldModelBundle,
    obs: &[Vec<f32>],
    actions: &[Vec<f32>],
    state: &[f32],
) -> Result<Prediction, WorldError> {
    let widen = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
    let obs_arr: Vec<Array> =
        obs.iter().map(|o| Array::from_vec(&[1, o.len()], widen(o)).unwrap()).collect();
    let act_arr: Vec<Array> =
        actions.iter().map(|a| Array::from_vec(&[1, a.len()], widen(a)).unwrap()).collect();
    let state_arr = Array::from_vec(&[1, state.len()], widen(state)).unwrap();
    let out = bundle.predict_batch(&obs_arr, &act_arr, &state_arr);
    if !out.row_is_finite(0) {
        return Err(WorldError::NonFinitePrediction { detail: format!("state {state:?}") });
    }
    Ok(Prediction {
        next_state: out.next_state.data().iter().map(|&v| v as f32).collect(),
        reward: out.reward[0] as f32,
        u: out.u[0],
        obs_hat: out
            .obs_hat
            .iter()
            .map(|o| o.data().iter().map(|&v| v as f32).collect())
            .collect(),
    })
}

/// Row-wise concatenation of two `[rows, ·]` arrays.
pub(crate) fn hcat(a: &Array, b: &Array) -> Array {
    let (rows, ca) = a.row_view();
    let (rb, cb) = b.row_view();
    assert_eq!(rows, rb, "hcat: row mismatch");
    let mut data = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * ca..][..ca]);
        data.extend_from_slice(&b.data()[r * cb..][..cb]);
    }
    Array::from_vec(&[rows, ca + cb], data).unwrap()
}

/// Row-wise column slice of a `[rows, ·]` array.
fn col_slice(a: &Array, start: usize, len: usize) -> Array {
    let (rows, cols) = a.row_view();
    assert!(start + len <= cols, "col_slice out of range");
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * cols + start..][..len]);
    }
    Array::from_vec(&[rows, len], data).unwrap()
}

/// The full training tape with handles to each loss component. Row count is
/// baked in because reconstruction terms divide by it.
pub struct WorldGraph {
    pub graph: TapeGraph,
    pub predictive: NodeId,
    pub deductive: NodeId,
    pub deduce_reg: NodeId,
    pub uncertainty: NodeId,
    pub total: NodeId,
}

pub fn build_world_graph(
    spec: &EnvSpec,
    hidden: usize,
    feature: usize,
    rows: usize,
) -> WorldGraph {
    let defs = make_defs(spec, hidden, feature);
    let (n, od, sd) = (spec.n_agents, spec.obs_dim, spec.state_dim);
    let mut g = TapeGraph::new();

    let state = g.input("in/state");
    let state_reward = g.input("in/state_reward");
    let joint_next_obs = g.input("in/joint_next_obs");
    let noise_d = g.input("in/noise_d");

    let inv_rows = 1.0 / rows as f64;
    let mut per_agent_losses = Vec::with_capacity(n);
    let mut aux_losses = Vec::with_capacity(n);
    let mut obs_samples = Vec::with_capacity(n);
    for (i, a) in defs.agents.iter().enumerate() {
        let obs = g.input(&format!("in/obs{i}"));
        let act = g.input(&format!("in/act{i}"));
        let next_obs = g.input(&format!("in/next_obs{i}"));
        let noise = g.input(&format!("in/noise_p{i}"));

        let hs = a.state_feat.build(&mut g, state);
        let oa = g.concat(&[obs, act]);
        let hoa = a.oa_feat.build(&mut g, oa);
        let feat = g.concat(&[hs, hoa]);

        let head = a.obs_head.build(&mut g, feat);
        let (mean, log_std) = gaussian_nodes(&mut g, head, od);
        let nll = g.gauss_nll(mean, log_std, next_obs);
        let sample = g.reparam(mean, log_std, noise);
        let recon = a.recon.build(&mut g, sample);
        let residual = g.sub(oa, recon);
        let sq = g.squared_l2(residual);
        let dec = g.scale(sq, inv_rows);
        per_agent_losses.push(g.add(nll, dec));
        obs_samples.push(sample);

        let aux = a.aux_head.build(&mut g, feat);
        let (aux_mean, aux_log_std) = gaussian_nodes(&mut g, aux, sd + 1);
        aux_losses.push(g.gauss_nll(aux_mean, aux_log_std, state_reward));
    }
    let sum_p = per_agent_losses.into_iter().reduce(|x, y| g.add(x, y)).unwrap();
    let predictive = g.scale(sum_p, 1.0 / n as f64);
    let sum_aux = aux_losses.into_iter().reduce(|x, y| g.add(x, y)).unwrap();
    let uncertainty = g.scale(sum_aux, 1.0 / n as f64);

    let enc = defs.joint_enc.build(&mut g, state_reward);
    let (enc_mean, enc_log_std) = gaussian_nodes(&mut g, enc, n * od);
    let nll_d = g.gauss_nll(enc_mean, enc_log_std, joint_next_obs);
    let obs_prime = g.reparam(enc_mean, enc_log_std, noise_d);
    let recon_d = defs.state_dec.build(&mut g, obs_prime);
    let res_d = g.sub(state_reward, recon_d);
    let sq_d = g.squared_l2(res_d);
    let dec_d = g.scale(sq_d, inv_rows);
    let deductive = g.add(nll_d, dec_d);

    let joint_hat = g.concat(&obs_samples);
    let joint_hat_sg = g.stop_grad(joint_hat);
    let recon_hat = defs.state_dec.build(&mut g, joint_hat_sg);
    let res_hat = g.sub(state_reward, recon_hat);
    let sq_hat = g.squared_l2(res_hat);
    let deduce_reg = g.scale(sq_hat, inv_rows);

    let pd = g.add(predictive, deductive);
    let pdr = g.add(pd, deduce_reg);
    let total = g.add(pdr, uncertainty);
    g.set_output(total);
    WorldGraph { graph: g, predictive, deductive, deduce_reg, uncertainty, total }
}

/// Binds a batch to the graph's input leaves (noise not included).
pub fn batch_bindings(batch: &Batch) -> Bindings {
    let mut b = Bindings::new();
    b.insert("in/state".into(), batch.state.clone());
    b.insert("in/state_reward".into(), batch.state_reward.clone());
    b.insert("in/joint_next_obs".into(), batch.joint_next_obs.clone());
    for i in 0..batch.obs.len() {
        b.insert(format!("in/obs{i}"), batch.obs[i].clone());
        b.insert(format!("in/act{i}"), batch.actions[i].clone());
        b.insert(format!("in/next_obs{i}"), batch.next_obs[i].clone());
    }
    b
}

/// Standard-normal draws for every reparameterized sample in the graph.
pub fn noise_bindings(spec: &EnvSpec, rows: usize, seed: u64) -> Bindings {
    let mut rng = derive_rng(seed, "wm/noise");
    let mut draw = |count: usize| -> Vec<f64> {
        (0..count).map(|_| rng.sample(StandardNormal)).collect()
    };
    let mut b = Bindings::new();
    for i in 0..spec.n_agents {
        b.insert(
            format!("in/noise_p{i}"),
            Array::from_vec(&[rows, spec.obs_dim], draw(rows * spec.obs_dim)).unwrap(),
        );
    }
    let joint = spec.n_agents * spec.obs_dim;
    b.insert("in/noise_d".into(), Array::from_vec(&[rows, joint], draw(rows * joint)).unwrap());
    b
}

/// All four loss components plus their sum, from one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldLosses {
    pub predictive: f64,
    pub deductive: f64,
    pub deduce_reg: f64,
    pub uncertainty: f64,
    pub total: f64,
}

pub fn world_losses(
    bundle: &WorldModelBundle,
    batch: &Batch,
    noise_seed: u64,
) -> Result<WorldLosses, WorldError> {
    let mut wg = build_world_graph(&bundle.spec, bundle.hidden, bundle.feature, batch.rows);
    let mut inputs = batch_bindings(batch);
    inputs.extend(noise_bindings(&bundle.spec, batch.rows, noise_seed));
    wg.graph.forward(&[bundle.params.bindings(), &inputs])?;
    let read = |id: NodeId| wg.graph.node_value(id).unwrap().scalar_value();
    Ok(WorldLosses {
        predictive: read(wg.predictive),
        deductive: read(wg.deductive),
        deduce_reg: read(wg.deduce_reg),
        uncertainty: read(wg.uncertainty),
        total: read(wg.total),
    })
}

pub fn loss_predictive(b: &WorldModelBundle, batch: &Batch, seed: u64) -> Result<f64, WorldError> {
    Ok(world_losses(b, batch, seed)?.predictive)
}

pub fn loss_deductive(b: &WorldModelBundle, batch: &Batch, seed: u64) -> Result<f64, WorldError> {
    Ok(world_losses(b, batch, seed)?.deductive)
}

pub fn loss_deduce_reg(b: &WorldModelBundle, batch: &Batch, seed: u64) -> Result<f64, WorldError> {
    Ok(world_losses(b, batch, seed)?.deduce_reg)
}

pub fn loss_uncertainty_head(
    b: &WorldModelBundle,
    batch: &Batch,
    seed: u64,
) -> Result<f64, WorldError> {
    Ok(world_losses(b, batch, seed)?.uncertainty)
}

pub fn loss_world(b: &WorldModelBundle, batch: &Batch, seed: u64) -> Result<f64, WorldError> {
    Ok(world_losses(b, batch, seed)?.total)
}

#[derive(Debug, Clone, Copy)]
pub struct WorldStepRow {
    pub step: usize,
    pub predictive: f64,
    pub deductive: f64,
    pub deduce_reg: f64,
    pub uncertainty: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct WorldLog {
    pub steps: Vec<WorldStepRow>,
    /// (step, one-step next-state MSE per dimension on validation).
    pub val: Vec<(usize, f64)>,
    pub c_clip: Option<f64>,
}

impl WorldLog {
    pub fn initial_val_mse(&self) -> Option<f64> {
        self.val.first().map(|&(_, m)| m)
    }

    pub fn final_val_mse(&self) -> Option<f64> {
        self.val.last().map(|&(_, m)| m)
    }
}

pub struct WorldTrainOutput {
    pub bundle: WorldModelBundle,
    pub log: WorldLog,
}

/// Mean over transitions of ‖predicted next state − true next state‖² / dim.
pub fn validation_state_mse(bundle: &WorldModelBundle, ds: &Dataset) -> Result<f64, WorldError> {
    if ds.is_empty() {
        return Err(WorldError::EmptyDataset("validation"));
    }
    let sd = bundle.spec.state_dim;
    let mut total = 0.0;
    for chunk in ds.transitions.chunks(512) {
        let refs: Vec<&crate::dataset::Transition> = chunk.iter().collect();
        let batch = make_batch(&bundle.spec, &refs);
        let out = bundle.predict_from_batch(&batch);
        for (r, t) in chunk.iter().enumerate() {
            let pred = &out.next_state.data()[r * sd..][..sd];
            total += pred
                .iter()
                .zip(&t.next_state)
                .map(|(p, s)| (p - *s as f64) * (p - *s as f64))
                .sum::<f64>()
                / sd as f64;
        }
    }
    Ok(total / ds.len() as f64)
}

/// Per-transition L2 distance between the deduced next state (mean mode)
/// and the true next state, the quantity `u` is meant to track.
pub fn state_errors(bundle: &WorldModelBundle, ds: &Dataset) -> Vec<f64> {
    let sd = bundle.spec.state_dim;
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.transitions.chunks(512) {
        let refs: Vec<&crate::dataset::Transition> = chunk.iter().collect();
        let batch = make_batch(&bundle.spec, &refs);
        let pred = bundle.predict_from_batch(&batch);
        for (r, t) in chunk.iter().enumerate() {
            let row = &pred.next_state.data()[r * sd..][..sd];
            let sq: f64 = row
                .iter()
                .zip(&t.next_state)
                .map(|(p, s)| (p - *s as f64) * (p - *s as f64))
                .sum();
            out.push(sq.sqrt());
        }
    }
    out
}

/// Uncertainty score per transition, mean-mode inference.
pub fn uncertainties(bundle: &WorldModelBundle, ds: &Dataset) -> Vec<f64> {
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.transitions.chunks(512) {
        let refs: Vec<&crate::dataset::Transition> = chunk.iter().collect();
        let batch = make_batch(&bundle.spec, &refs);
        out.extend(bundle.predict_from_batch(&batch).u);
    }
    out
}

/// Adam on the combined loss. Logs every step's components, validation MSE
/// at step 0, every `val_every` steps, and after the final step, then
/// calibrates the priority clipping constant on the validation split.
pub fn train_world_model(
    train: &Dataset,
    val: &Dataset,
    cfg: &WorldModelConfig,
) -> Result<WorldTrainOutput, WorldError> {
    if train.is_empty() {
        return Err(WorldError::EmptyDataset("train"));
    }
    if val.is_empty() {
        return Err(WorldError::EmptyDataset("validation"));
    }
    let mut bundle = WorldModelBundle::new(
        train.spec.clone(),
        cfg.hidden,
        cfg.feature,
        derive_seed(cfg.seed, "wm/init"),
    );
    let mut log = WorldLog::default();
    if cfg.steps > 0 {
        let rows = cfg.batch.min(train.len());
        let full_batch = rows == train.len();
        let mut wg = build_world_graph(&bundle.spec, cfg.hidden, cfg.feature, rows);
        let group = wg.graph.trainable_leaf_names();
        let mut adam = AdamState::new(cfg.lr, group);
        let mut batch_rng = derive_rng(cfg.seed, "wm/batch");
        for step in 0..cfg.steps {
            if step % cfg.val_every == 0 {
                log.val.push((step, validation_state_mse(&bundle, val)?));
            }
            let idx: Vec<usize> = if full_batch {
                (0..rows).collect()
            } else {
                (0..rows).map(|_| batch_rng.random_range(0..train.len())).collect()
            };
            let refs: Vec<&crate::dataset::Transition> =
                idx.iter().map(|&i| &train.transitions[i]).collect();
            let batch = make_batch(&train.spec, &refs);
            let mut inputs = batch_bindings(&batch);
            inputs.extend(noise_bindings(
                &bundle.spec,
                rows,
                derive_seed(cfg.seed, &format!("wm/noise/{step}")),
            ));
            let total = wg.graph.forward(&[bundle.params.bindings(), &inputs])?.scalar_value();
            let read = |g: &TapeGraph, id: NodeId| g.node_value(id).unwrap().scalar_value();
            log.steps.push(WorldStepRow {
                step,
                predictive: read(&wg.graph, wg.predictive),
                deductive: read(&wg.graph, wg.deductive),
                deduce_reg: read(&wg.graph, wg.deduce_reg),
                uncertainty: read(&wg.graph, wg.uncertainty),
                total,
            });
            if !total.is_finite() || total > DIVERGENCE_LIMIT {
                return Err(WorldError::Diverged { step, loss: total, log: Box::new(log) });
            }
            let grads = wg.graph.backward()?;
            adam.step(bundle.params.bindings_mut(), &grads)?;
        }
        log.val.push((cfg.steps, validation_state_mse(&bundle, val)?));
    }
    let c = crate::rollout::calibrate_c(&bundle, val)?;
    bundle.c_clip = Some(c);
    log.c_clip = Some(c);
    Ok(WorldTrainOutput { bundle, log })
}

pub fn to_tensor_file(bundle: &WorldModelBundle) -> TensorFile {
    let mut f = TensorFile::new(TAG_WORLD);
    f.push("meta/spec", &[20], io::bytes_as_f32s(&bundle.spec.meta_bytes()));
    f.push("meta/hidden", &[1], vec![bundle.hidden as f32]);
    f.push("meta/feature", &[1], vec![bundle.feature as f32]);
    if let Some(c) = bundle.c_clip {
        f.push("meta/c_clip", &[8], io::bytes_as_f32s(&c.to_le_bytes()));
    }
    io::push_params(&mut f, "param/", &bundle.params);
    f
}

pub fn from_tensor_file(f: &TensorFile) -> Result<WorldModelBundle, WorldError> {
    f.expect_tag(TAG_WORLD)?;
    let meta = io::f32s_as_bytes(&f.get("meta/spec")?.data)?;
    let spec = EnvSpec::from_meta_bytes(&meta).ok_or(WorldError::BadMeta)?;
    let hidden = f.get_scalar("meta/hidden")? as usize;
    let feature = f.get_scalar("meta/feature")? as usize;
    let c_clip = match f.get("meta/c_clip") {
        Ok(e) => {
            let bytes = io::f32s_as_bytes(&e.data)?;
            let arr: [u8; 8] = bytes.as_slice().try_into().map_err(|_| WorldError::BadMeta)?;
            Some(f64::from_le_bytes(arr))
        }
        Err(_) => None,
    };
    let params = io::read_params(f, "param/")?;
    let bundle = WorldModelBundle { spec, hidden, feature, params, c_clip };
    let defs = bundle.defs();
    let all = defs
        .agents
        .iter()
        .flat_map(|a| {
            [&a.state_feat, &a.oa_feat, &a.obs_head, &a.recon, &a.aux_head]
                .into_iter()
                .flat_map(MlpDef::param_names)
        })
        .chain(defs.joint_enc.param_names())
        .chain(defs.state_dec.param_names());
    for name in all {
        if bundle.params.get(&name).is_none() {
            return Err(WorldError::BadCheckpoint(name));
        }
    }
    Ok(bundle)
}

pub fn save(bundle: &WorldModelBundle, path: &Path) -> Result<(), WorldError> {
    to_tensor_file(bundle).save(path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<WorldModelBundle, WorldError> {
    from_tensor_file(&TensorFile::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{collect, split, Tier, Transition};
    use crate::nn::{LOG_STD_MAX, LOG_STD_MIN};
    use crate::stats;
    use crate::tensor::finite_diff_check;

    fn spec2() -> EnvSpec {
        EnvSpec::particle(2, 25, 0.99, 1.0)
    }

    fn zero_batch(spec: &EnvSpec, rows: usize) -> Batch {
        let t = Transition {
            obs: vec![vec![0.0; spec.obs_dim]; spec.n_agents],
            state: vec![0.0; spec.state_dim],
            actions: vec![vec![0.0; spec.action_dim]; spec.n_agents],
            next_state: vec![0.0; spec.state_dim],
            next_obs: vec![vec![0.0; spec.obs_dim]; spec.n_agents],
            reward: 0.0,
            done: false,
            priority: None,
        };
        let items: Vec<Transition> = vec![t; rows];
        let refs: Vec<&Transition> = items.iter().collect();
        make_batch(spec, &refs)
    }

    fn zero_bundle(spec: &EnvSpec) -> WorldModelBundle {
        let mut b = WorldModelBundle::new(spec.clone(), 16, 8, 0);
        let names: Vec<String> = b.params.names().cloned().collect();
        for name in names {
            let shape = b.params.get(&name).unwrap().shape().to_vec();
            b.params.insert(&name, Array::zeros(&shape));
        }
        b
    }

    #[test]
    fn zero_model_on_zero_data_gives_nll_constants() {
        let spec = spec2();
        let bundle = zero_bundle(&spec);
        let batch = zero_batch(&spec, 4);
        let losses = world_losses(&bundle, &batch, 0).unwrap();
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(losses.predictive, spec.obs_dim as f64 * half_ln_2pi));
        assert!(close(losses.uncertainty, (spec.state_dim + 1) as f64 * half_ln_2pi));
        assert!(close(
            losses.deductive,
            (spec.n_agents * spec.obs_dim) as f64 * half_ln_2pi
        ));
        assert!(close(losses.deduce_reg, 0.0));
    }

    #[test]
    fn doubling_the_reconstruction_residual_quadruples_the_decoder_term() {
        let spec = spec2();
        let bundle = zero_bundle(&spec);
        let base = world_losses(&bundle, &zero_batch(&spec, 3), 7).unwrap();

        let mut batch_1 = zero_batch(&spec, 3);
        let mut batch_2 = zero_batch(&spec, 3);
        let od = spec.obs_dim;
        batch_1.obs = (0..spec.n_agents)
            .map(|_| Array::from_vec(&[3, od], vec![0.5; 3 * od]).unwrap())
            .collect();
        batch_2.obs = (0..spec.n_agents)
            .map(|_| Array::from_vec(&[3, od], vec![1.0; 3 * od]).unwrap())
            .collect();
        let dec_1 = world_losses(&bundle, &batch_1, 7).unwrap().predictive - base.predictive;
        let dec_2 = world_losses(&bundle, &batch_2, 7).unwrap().predictive - base.predictive;
        assert!((dec_2 - 4.0 * dec_1).abs() < 1e-9, "dec_1={dec_1} dec_2={dec_2}");
    }

    #[test]
    fn combined_loss_is_the_exact_sum_of_components() {
        let ds = collect(&spec2(), Tier::Medium, 1, 3);
        let refs: Vec<&Transition> = ds.transitions.iter().take(5).collect();
        let batch = make_batch(&ds.spec, &refs);
        let bundle = WorldModelBundle::new(ds.spec.clone(), 16, 8, 1);
        let l = world_losses(&bundle, &batch, 11).unwrap();
        assert_eq!(l.total, l.predictive + l.deductive + l.deduce_reg + l.uncertainty);
    }

    #[test]
    fn deduce_reg_gradient_stops_at_the_predicted_observations() {
        let ds = collect(&spec2(), Tier::Medium, 1, 4);
        let refs: Vec<&Transition> = ds.transitions.iter().take(4).collect();
        let batch = make_batch(&ds.spec, &refs);
        let bundle = WorldModelBundle::new(ds.spec.clone(), 16, 8, 2);

        let mut wg = build_world_graph(&ds.spec, 16, 8, 4);
        wg.graph.set_output(wg.deduce_reg);
        let mut inputs = batch_bindings(&batch);
        inputs.extend(noise_bindings(&ds.spec, 4, 5));
        wg.graph.forward(&[bundle.params.bindings(), &inputs]).unwrap();
        let grads = wg.graph.backward().unwrap();

        for (name, g) in &grads {
            let zero = g.data().iter().all(|&v| v == 0.0);
            if name.starts_with("ded/state_dec") {
                assert!(!zero, "decoder gradient vanished for {name}");
            } else {
                assert!(zero, "gradient leaked into {name}");
            }
        }
    }

    #[test]
    fn deduce_reg_matches_explicit_composition() {
        let ds = collect(&spec2(), Tier::Medium, 1, 5);
        let refs: Vec<&Transition> = ds.transitions.iter().take(4).collect();
        let batch = make_batch(&ds.spec, &refs);
        let bundle = WorldModelBundle::new(ds.spec.clone(), 16, 8, 3);
        let noise_seed = 13;
        let losses = world_losses(&bundle, &batch, noise_seed).unwrap();

        let defs = bundle.defs();
        let noise = noise_bindings(&ds.spec, 4, noise_seed);
        let mut samples = Vec::new();
        for i in 0..ds.spec.n_agents {
            let a = &defs.agents[i];
            let hs = a.state_feat.forward_batch(&bundle.params, &batch.state);
            let oa = hcat(&batch.obs[i], &batch.actions[i]);
            let hoa = a.oa_feat.forward_batch(&bundle.params, &oa);
            let feat = hcat(&hs, &hoa);
            let head = a.obs_head.forward_batch(&bundle.params, &feat);
            let mean = col_slice(&head, 0, ds.spec.obs_dim);
            let log_std = col_slice(&head, ds.spec.obs_dim, ds.spec.obs_dim);
            let eps = &noise[&format!("in/noise_p{i}")];
            let sample: Vec<f64> = mean
                .data()
                .iter()
                .zip(log_std.data())
                .zip(eps.data())
                .map(|((m, l), e)| {
                    m + l.clamp(LOG_STD_MIN, LOG_STD_MAX).exp() * e
                })
                .collect();
            samples.push(Array::from_vec(&[4, ds.spec.obs_dim], sample).unwrap());
        }
        let joint = samples.iter().skip(1).fold(samples[0].clone(), |a, b| hcat(&a, b));
        let recon = defs.state_dec.forward_batch(&bundle.params, &joint);
        let manual: f64 = batch
            .state_reward
            .data()
            .iter()
            .zip(recon.data())
            .map(|(t, p)| (t - p) * (t - p))
            .sum::<f64>()
            * (1.0 / 4.0);
        assert_eq!(losses.deduce_reg, manual);
    }

    #[test]
    fn world_loss_passes_a_finite_difference_check() {
        let ds = collect(&spec2(), Tier::Medium, 1, 6);
        let refs: Vec<&Transition> = ds.transitions.iter().take(3).collect();
        let batch = make_batch(&ds.spec, &refs);
        let mut bundle = WorldModelBundle::new(ds.spec.clone(), 6, 4, 4);

        let wg = build_world_graph(&ds.spec, 6, 4, 3);
        let mut graph = wg.graph;
        let mut inputs = batch_bindings(&batch);
        inputs.extend(noise_bindings(&ds.spec, 3, 9));
        let err =
            finite_diff_check(&mut graph, bundle.params.bindings_mut(), &inputs, 1e-4).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn zero_bundle_paths_coincide_and_u_is_zero() {
        let spec = spec2();
        let bundle = zero_bundle(&spec);
        let batch = zero_batch(&spec, 2);
        let out = bundle.predict_from_batch(&batch);
        assert_eq!(out.u, vec![0.0, 0.0]);
    }

    #[test]
    fn unit_state_offset_gives_unit_uncertainty() {
        let spec = spec2();
        let mut bundle = zero_bundle(&spec);
        let mut bias = vec![0.0; spec.state_dim + 1];
        bias[0] = 1.0;
        bundle.params.insert("ded/state_dec/b2", Array::from_vec(&[spec.state_dim + 1], bias).unwrap());
        let out = bundle.predict_from_batch(&zero_batch(&spec, 1));
        assert_eq!(out.u, vec![1.0]);
        assert_eq!(out.reward, vec![0.0]);
    }

    #[test]
    fn prediction_is_deterministic() {
        let ds = collect(&spec2(), Tier::Medium, 1, 7);
        let bundle = WorldModelBundle::new(ds.spec.clone(), 16, 8, 5);
        let t = &ds.transitions[3];
        let a = predict_next(&bundle, &t.obs, &t.actions, &t.state).unwrap();
        let b = predict_next(&bundle, &t.obs, &t.actions, &t.state).unwrap();
        assert_eq!(a.next_state, b.next_state);
        assert_eq!(a.reward, b.reward);
        assert_eq!(a.u, b.u);
        assert_eq!(a.obs_hat, b.obs_hat);
    }

    #[test]
    fn training_reduces_validation_mse_and_is_seed_deterministic() {
        let spec = spec2();
        let ds = collect(&spec, Tier::Medium, 20, 8);
        let (train, val) = split(&ds, 0.2, 0);
        let cfg = WorldModelConfig {
            steps: 200,
            batch: 16,
            hidden: 32,
            feature: 16,
            val_every: 100,
            seed: 1,
            ..WorldModelConfig::default()
        };
        let out = train_world_model(&train, &val, &cfg).unwrap();
        let init = out.log.initial_val_mse().unwrap();
        let fin = out.log.final_val_mse().unwrap();
        assert!(fin < init, "val MSE did not improve: {init} -> {fin}");
        assert!(out.log.c_clip.unwrap() > 0.0);
        assert_eq!(out.log.steps.len(), 200);

        let again = train_world_model(&train, &val, &cfg).unwrap();
        assert_eq!(out.bundle.params, again.bundle.params);
    }

    #[test]
    fn zero_steps_returns_the_initialized_bundle_and_empty_log() {
        let spec = spec2();
        let ds = collect(&spec, Tier::Medium, 4, 9);
        let (train, val) = split(&ds, 0.25, 0);
        let cfg = WorldModelConfig {
            steps: 0,
            hidden: 16,
            feature: 8,
            seed: 2,
            ..WorldModelConfig::default()
        };
        let out = train_world_model(&train, &val, &cfg).unwrap();
        assert!(out.log.steps.is_empty());
        assert!(out.log.val.is_empty());
        let fresh =
            WorldModelBundle::new(spec.clone(), 16, 8, derive_seed(2, "wm/init"));
        assert_eq!(out.bundle.params, fresh.params);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wm.logo");
        let mut bundle = WorldModelBundle::new(spec2(), 16, 8, 6);
        bundle.c_clip = Some(0.123456789123456789);
        save(&bundle, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.c_clip, bundle.c_clip);
        assert_eq!(loaded.hidden, 16);
        assert_eq!(loaded.feature, 8);
        let bytes = std::fs::read(&path).unwrap();
        save(&loaded, &path).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
    }

    #[test]
    fn checkpoint_with_missing_parameter_is_rejected() {
        let bundle = WorldModelBundle::new(spec2(), 16, 8, 7);
        let mut f = to_tensor_file(&bundle);
        let victim = "param/p0/recon/w1";
        f.entries.retain(|e| e.name != victim);
        let err = from_tensor_file(&f).unwrap_err();
        assert!(matches!(err, WorldError::BadCheckpoint(name) if name == "p0/recon/w1"));
    }

    #[test]
    fn predictive_loss_decreases_over_training_windows() {
        let spec = spec2();
        let ds = collect(&spec, Tier::Medium, 20, 10);
        let (train, val) = split(&ds, 0.2, 0);
        // Full-batch steps keep the per-step loss free of minibatch noise,
        // so window means track the optimization trend itself.
        let cfg = WorldModelConfig {
            steps: 1000,
            batch: 400,
            lr: 3e-4,
            hidden: 32,
            feature: 16,
            seed: 3,
            ..WorldModelConfig::default()
        };
        let out = train_world_model(&train, &val, &cfg).unwrap();
        let window_means: Vec<f64> = out
            .log
            .steps
            .chunks(10)
            .map(|w| stats::mean(&w.iter().map(|r| r.predictive).collect::<Vec<f64>>()))
            .collect();
        let decreasing = window_means
            .windows(2)
            .filter(|pair| pair[1] < pair[0])
            .count();
        let frac = decreasing as f64 / (window_means.len() - 1) as f64;
        assert!(frac >= 0.9, "only {frac:.2} of windows decreased");
    }
}
