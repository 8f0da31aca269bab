//! Synthetic data generation and uncertainty-weighted sampling.
//!
//! Rollouts start from real dataset states, step the world model with the
//! current policy plus exploration noise, and tag every generated transition
//! with a confidence priority `P_u = clip(C − u, [0, C])`. Minibatches for
//! policy training mix a uniform real half with a synthetic half drawn under
//! softmax(P_u) weights over the whole buffer.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{make_batch, Batch, Dataset, Provenance, Transition};
use crate::rng::derive_rng;
use crate::stats;
use crate::tensor::Array;
use crate::world::{WorldError, WorldModelBundle};

/// Floor for the calibrated clip constant; it binds only if every
/// validation uncertainty is exactly zero.
pub const MIN_CLIP: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub starts_per_refresh: usize,
    /// Std of the Gaussian exploration noise added to policy actions.
    pub action_noise: f64,
    /// Priority clip constant C.
    pub clip_c: f64,
}

impl RolloutConfig {
    pub fn new(horizon: usize, starts_per_refresh: usize, action_noise: f64, clip_c: f64) -> Self {
        assert!(horizon >= 1, "horizon must be at least 1");
        assert!(clip_c > 0.0, "clip constant must be positive");
        RolloutConfig { horizon, starts_per_refresh, action_noise, clip_c }
    }
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { horizon: 15, starts_per_refresh: 100, action_noise: 0.1, clip_c: 1.0 }
    }
}

/// Anything that can propose per-agent actions for a batch of observations;
/// the policy trainer provides the real implementation.
pub trait RolloutPolicy {
    /// `obs[i]` is `[rows, obs_dim]`; returns per-agent `[rows, action_dim]`
    /// action means in the action box.
    fn act_batch(&self, obs: &[Array]) -> Vec<Array>;
}

/// World-model-generated transitions with cached sampling weights. Weights
/// are recomputed on every mutation so they always sum to 1 over the
/// current contents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyntheticBuffer {
    transitions: Vec<Transition>,
    weights: Vec<f64>,
    /// Rollout step index (0-based within its trajectory) per transition.
    step_index: Vec<usize>,
    /// Raw uncertainty `u` per transition, kept alongside the clipped
    /// priority for reward-penalty ablations.
    uncertainty: Vec<f64>,
    refresh_epoch: u64,
}

impl SyntheticBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn step_indices(&self) -> &[usize] {
        &self.step_index
    }

    pub fn uncertainties(&self) -> &[f64] {
        &self.uncertainty
    }

    pub fn refresh_epoch(&self) -> u64 {
        self.refresh_epoch
    }

    pub fn priorities(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.priority.expect("synthetic priority") as f64).collect()
    }

    /// Swaps in a fresh generation of transitions.
    pub fn replace(
        &mut self,
        transitions: Vec<Transition>,
        step_index: Vec<usize>,
        uncertainty: Vec<f64>,
    ) {
        assert_eq!(transitions.len(), step_index.len());
        assert_eq!(transitions.len(), uncertainty.len());
        assert!(transitions.iter().all(|t| t.priority.is_some()), "synthetic data needs P_u");
        self.transitions = transitions;
        self.step_index = step_index;
        self.uncertainty = uncertainty;
        self.refresh_epoch += 1;
        self.recompute_weights();
    }

    pub fn push(&mut self, t: Transition, step: usize, u: f64) {
        assert!(t.priority.is_some(), "synthetic data needs P_u");
        self.transitions.push(t);
        self.step_index.push(step);
        self.uncertainty.push(u);
        self.recompute_weights();
    }

    fn recompute_weights(&mut self) {
        self.weights = if self.transitions.is_empty() {
            Vec::new()
        } else {
            softmax_weights(&self.priorities())
        };
    }

    /// Mean uncertainty-priority per rollout step index, for drift checks.
    pub fn mean_priority_by_step(&self) -> Vec<(usize, f64)> {
        let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for (t, &s) in self.transitions.iter().zip(&self.step_index) {
            let e = sums.entry(s).or_insert((0.0, 0));
            e.0 += t.priority.unwrap() as f64;
            e.1 += 1;
        }
        sums.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()
    }
}

/// Confidence priority: full confidence `C` at zero uncertainty, zero at
/// uncertainty `C` or beyond.
pub fn compute_priority(u: f64, c: f64) -> f64 {
    assert!(u >= 0.0, "uncertainty must be non-negative");
    assert!(c > 0.0, "clip constant must be positive");
    (c - u).clamp(0.0, c)
}

/// Clip constant from a set of validation uncertainties: mean + 2·std.
pub fn clip_from_uncertainties(u: &[f64]) -> f64 {
    assert!(!u.is_empty(), "need at least one uncertainty value");
    (stats::mean(u) + 2.0 * stats::std_pop(u)).max(MIN_CLIP)
}

/// Calibrates the clip constant on a validation split.
pub fn calibrate_c(bundle: &WorldModelBundle, val: &Dataset) -> Result<f64, WorldError> {
    if val.is_empty() {
        return Err(WorldError::EmptyDataset("validation"));
    }
    Ok(clip_from_uncertainties(&crate::world::uncertainties(bundle, val)))
}

/// Max-subtracted softmax over priorities; always sums to 1.
pub fn softmax_weights(priorities: &[f64]) -> Vec<f64> {
    assert!(!priorities.is_empty());
    let m = priorities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = priorities.iter().map(|p| (p - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Current sampling weight per buffered transition.
pub fn sample_weights(buffer: &SyntheticBuffer) -> Vec<f64> {
    buffer.weights().to_vec()
}

/// Rolls the world model forward from dataset states under the policy plus
/// exploration noise. A non-finite prediction truncates that trajectory at
/// the offending step; earlier steps are kept.
pub fn generate_rollouts(
    bundle: &WorldModelBundle,
    policy: &impl RolloutPolicy,
    d: &Dataset,
    cfg: &RolloutConfig,
    seed: u64,
) -> SyntheticBuffer {
    assert!(!d.is_empty(), "need a dataset to draw start states from");
    let spec = &bundle.spec;
    let (n, od, ad, sd) = (spec.n_agents, spec.obs_dim, spec.action_dim, spec.state_dim);
    let starts = cfg.starts_per_refresh;

    let mut start_rng = derive_rng(seed, "rollout/starts");
    let chosen: Vec<&Transition> =
        (0..starts).map(|_| &d.transitions[start_rng.random_range(0..d.len())]).collect();

    let mut cur_obs: Vec<Vec<Vec<f32>>> = chosen.iter().map(|t| t.obs.clone()).collect();
    let mut cur_state: Vec<Vec<f32>> = chosen.iter().map(|t| t.state.clone()).collect();
    let mut active = vec![true; starts];

    let mut transitions = Vec::with_capacity(starts * cfg.horizon);
    let mut step_index = Vec::with_capacity(starts * cfg.horizon);
    let mut uncertainty = Vec::with_capacity(starts * cfg.horizon);
    for step in 0..cfg.horizon {
        if !active.iter().any(|&a| a) {
            break;
        }
        let widen = |rows: &dyn Fn(usize) -> Vec<f32>, cols: usize| -> Array {
            let mut data = Vec::with_capacity(starts * cols);
            for s in 0..starts {
                data.extend(rows(s).iter().map(|&v| v as f64));
            }
            Array::from_vec(&[starts, cols], data).unwrap()
        };
        let obs_arrs: Vec<Array> =
            (0..n).map(|i| widen(&|s| cur_obs[s][i].clone(), od)).collect();
        let state_arr = widen(&|s| cur_state[s].clone(), sd);

        let means = policy.act_batch(&obs_arrs);
        let mut noise_rng = derive_rng(seed, &format!("rollout/noise/{step}"));
        let act_arrs: Vec<Array> = means
            .iter()
            .map(|m| {
                let data: Vec<f64> = m
                    .data()
                    .iter()
                    .map(|&v| {
                        let e: f64 = noise_rng.sample(StandardNormal);
                        (v + cfg.action_noise * e).clamp(-1.0, 1.0)
                    })
                    .collect();
                Array::from_vec(&[starts, ad], data).unwrap()
            })
            .collect();

        let out = bundle.predict_batch(&obs_arrs, &act_arrs, &state_arr);
        for s in 0..starts {
            if !active[s] {
                continue;
            }
            if !out.row_is_finite(s) {
                active[s] = false;
                continue;
            }
            let next_state: Vec<f32> =
                out.next_state.data()[s * sd..][..sd].iter().map(|&v| v as f32).collect();
            let next_obs: Vec<Vec<f32>> = out
                .obs_hat
                .iter()
                .map(|o| o.data()[s * od..][..od].iter().map(|&v| v as f32).collect())
                .collect();
            let actions: Vec<Vec<f32>> = act_arrs
                .iter()
                .map(|a| a.data()[s * ad..][..ad].iter().map(|&v| v as f32).collect())
                .collect();
            let p = compute_priority(out.u[s], cfg.clip_c);
            let priority = (p as f32).clamp(0.0, cfg.clip_c as f32);
            transitions.push(Transition {
                obs: cur_obs[s].clone(),
                state: cur_state[s].clone(),
                actions,
                next_state: next_state.clone(),
                next_obs: next_obs.clone(),
                reward: out.reward[s] as f32,
                done: false,
                priority: Some(priority),
            });
            step_index.push(step);
            uncertainty.push(out.u[s]);
            cur_state[s] = next_state;
            cur_obs[s] = next_obs;
        }
    }
    let mut buffer = SyntheticBuffer::new();
    buffer.replace(transitions, step_index, uncertainty);
    buffer
}

/// A mixed real/synthetic minibatch. Rows 0..B/2 are the uniform real half,
/// the rest the weighted synthetic half (all of them real on fallback).
pub struct MixedBatch {
    pub batch: Batch,
    /// True when the buffer was empty and the whole batch is real data.
    pub fallback: bool,
    pub real_indices: Vec<usize>,
    pub synthetic_indices: Vec<usize>,
}

pub fn mixed_minibatch(
    d: &Dataset,
    buffer: &SyntheticBuffer,
    b: usize,
    seed: u64,
) -> MixedBatch {
    mixed_core(d, buffer, b, seed, true)
}

/// Penalty-arm variant: the synthetic half is drawn uniformly instead of by
/// priority weight. The real half and fallback behavior are identical.
pub fn mixed_minibatch_uniform(
    d: &Dataset,
    buffer: &SyntheticBuffer,
    b: usize,
    seed: u64,
) -> MixedBatch {
    mixed_core(d, buffer, b, seed, false)
}

fn mixed_core(d: &Dataset, buffer: &SyntheticBuffer, b: usize, seed: u64, weighted: bool) -> MixedBatch {
    assert!(b >= 2 && b % 2 == 0, "batch size must be even");
    assert!(!d.is_empty(), "real dataset must be non-empty");
    let mut real_rng = derive_rng(seed, "mix/real");
    if buffer.is_empty() {
        let real_indices: Vec<usize> =
            (0..b).map(|_| real_rng.random_range(0..d.len())).collect();
        let refs: Vec<&Transition> = real_indices.iter().map(|&i| &d.transitions[i]).collect();
        return MixedBatch {
            batch: make_batch(&d.spec, &refs),
            fallback: true,
            real_indices,
            synthetic_indices: Vec::new(),
        };
    }
    let real_indices: Vec<usize> =
        (0..b / 2).map(|_| real_rng.random_range(0..d.len())).collect();

    let mut synth_rng = derive_rng(seed, "mix/synth");
    let synthetic_indices: Vec<usize> = if weighted {
        let weights = buffer.weights();
        let mut cdf = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in weights {
            acc += w;
            cdf.push(acc);
        }
        (0..b / 2)
            .map(|_| {
                let x: f64 = synth_rng.random();
                match cdf.binary_search_by(|c| c.partial_cmp(&x).unwrap()) {
                    Ok(i) | Err(i) => i.min(weights.len() - 1),
                }
            })
            .collect()
    } else {
        (0..b / 2).map(|_| synth_rng.random_range(0..buffer.len())).collect()
    };

    let refs: Vec<&Transition> = real_indices
        .iter()
        .map(|&i| &d.transitions[i])
        .chain(synthetic_indices.iter().map(|&i| &buffer.transitions()[i]))
        .collect();
    MixedBatch {
        batch: make_batch(&d.spec, &refs),
        fallback: false,
        real_indices,
        synthetic_indices,
    }
}

/// Buffer dump in the dataset container with the priority column set.
pub fn buffer_to_dataset(buffer: &SyntheticBuffer, spec: &crate::env::EnvSpec) -> Dataset {
    let mut ds = Dataset::empty(spec.clone(), Provenance::Synthetic);
    for t in buffer.transitions() {
        ds.push(t.clone(), Provenance::Synthetic);
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{collect, Tier};
    use crate::env::EnvSpec;

    struct ZeroPolicy {
        action_dim: usize,
    }

    impl RolloutPolicy for ZeroPolicy {
        fn act_batch(&self, obs: &[Array]) -> Vec<Array> {
            obs.iter()
                .map(|o| Array::zeros(&[o.row_view().0, self.action_dim]))
                .collect()
        }
    }

    fn spec2() -> EnvSpec {
        EnvSpec::particle(2, 25, 0.99, 1.0)
    }

    #[test]
    fn priority_formula_matches_hand_values() {
        assert_eq!(compute_priority(0.0, 1.0), 1.0);
        assert_eq!(compute_priority(2.5, 1.0), 0.0);
        assert_eq!(compute_priority(0.3, 1.0), 0.7);
    }

    #[test]
    fn clip_constant_from_known_uncertainty_sets() {
        assert_eq!(clip_from_uncertainties(&[0.5; 8]), 0.5);
        assert_eq!(clip_from_uncertainties(&[0.0, 1.0, 0.0, 1.0]), 1.5);
        assert_eq!(clip_from_uncertainties(&[0.0; 4]), MIN_CLIP);
    }

    #[test]
    fn softmax_is_uniform_on_equal_priorities_and_matches_analytic_pair() {
        let w = softmax_weights(&[3.7, 3.7, 3.7]);
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = softmax_weights(&[2.0f64.ln(), 0.0]);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_agrees_with_naive_summation() {
        let mut rng = derive_rng(0, "test/softmax");
        let p: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..3.0)).collect();
        let stable = softmax_weights(&p);
        let z: f64 = p.iter().map(|v| v.exp()).sum();
        for (s, v) in stable.iter().zip(&p) {
            assert!((s - v.exp() / z).abs() < 1e-12);
        }
        assert!((stable.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_weights_are_monotone_in_priority() {
        let p = vec![0.1, 0.9, 0.5, 0.9, 0.0];
        let w = softmax_weights(&p);
        for i in 0..p.len() {
            for j in 0..p.len() {
                assert_eq!(p[i] >= p[j], w[i] >= w[j] || (p[i] == p[j]));
                if p[i] == p[j] {
                    assert_eq!(w[i], w[j]);
                }
            }
        }
    }

    #[test]
    fn rollouts_count_and_determinism() {
        let spec = spec2();
        let d = collect(&spec, Tier::Medium, 2, 0);
        let bundle = WorldModelBundle::new(spec.clone(), 16, 8, 0);
        let policy = ZeroPolicy { action_dim: spec.action_dim };
        let cfg = RolloutConfig::new(1, 10, 0.1, 1.0);
        let a = generate_rollouts(&bundle, &policy, &d, &cfg, 5);
        assert_eq!(a.len(), 10);
        assert_eq!(a.refresh_epoch(), 1);
        let b = generate_rollouts(&bundle, &policy, &d, &cfg, 5);
        assert_eq!(a, b);
        let c = generate_rollouts(&bundle, &policy, &d, &cfg, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn rollout_priorities_stay_in_range_and_weights_sum_to_one() {
        let spec = spec2();
        let d = collect(&spec, Tier::Medium, 2, 1);
        let bundle = WorldModelBundle::new(spec.clone(), 16, 8, 1);
        let policy = ZeroPolicy { action_dim: spec.action_dim };
        let cfg = RolloutConfig::new(5, 20, 0.1, 0.8);
        let buf = generate_rollouts(&bundle, &policy, &d, &cfg, 2);
        assert_eq!(buf.len(), 100);
        for t in buf.transitions() {
            let p = t.priority.unwrap();
            assert!((0.0..=0.8).contains(&p), "priority {p} out of range");
        }
        assert!((buf.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(buf.weights().iter().all(|&w| w > 0.0));
    }

    #[test]
    fn rollout_actions_stay_in_the_box() {
        let spec = spec2();
        let d = collect(&spec, Tier::Random, 2, 2);
        let bundle = WorldModelBundle::new(spec.clone(), 16, 8, 2);
        let policy = ZeroPolicy { action_dim: spec.action_dim };
        let cfg = RolloutConfig::new(3, 15, 5.0, 1.0);
        let buf = generate_rollouts(&bundle, &policy, &d, &cfg, 3);
        for t in buf.transitions() {
            for a in &t.actions {
                assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn mixed_minibatch_layout_and_fallback() {
        let spec = spec2();
        let d = collect(&spec, Tier::Medium, 2, 3);
        let bundle = WorldModelBundle::new(spec.clone(), 16, 8, 3);
        let policy = ZeroPolicy { action_dim: spec.action_dim };
        let buf = generate_rollouts(&bundle, &policy, &d, &RolloutConfig::default(), 4);

        let mb = mixed_minibatch(&d, &buf, 64, 0);
        assert!(!mb.fallback);
        assert_eq!(mb.real_indices.len(), 32);
        assert_eq!(mb.synthetic_indices.len(), 32);
        assert_eq!(mb.batch.rows, 64);
        // Row 0 comes from the real dataset.
        let first_real = &d.transitions[mb.real_indices[0]];
        assert_eq!(
            mb.batch.state.data()[..spec.state_dim],
            first_real.state.iter().map(|&v| v as f64).collect::<Vec<f64>>()[..]
        );

        let empty = SyntheticBuffer::new();
        let mb = mixed_minibatch(&d, &empty, 64, 0);
        assert!(mb.fallback);
        assert_eq!(mb.real_indices.len(), 64);
        assert!(mb.synthetic_indices.is_empty());
    }

    #[test]
    fn synthetic_draw_frequencies_track_weights() {
        let spec = spec2();
        let d = collect(&spec, Tier::Medium, 1, 4);
        let mut buf = SyntheticBuffer::new();
        for (i, t) in d.transitions.iter().take(5).enumerate() {
            let mut t = t.clone();
            let p = [1.0f32, 0.2, 0.2, 0.2, 0.2][i];
            t.priority = Some(p);
            buf.push(t, 0, (1.5 - p) as f64);
        }
        let weights = sample_weights(&buf);
        let mut counts = vec![0usize; 5];
        let draws = 200_000;
        let per_call = 32;
        for call in 0..draws / per_call {
            let mb = mixed_minibatch(&d, &buf, per_call * 2, call as u64);
            for &i in &mb.synthetic_indices {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!(
                (freq - weights[i]).abs() < 0.01,
                "index {i}: frequency {freq} vs weight {}",
                weights[i]
            );
        }
    }

    #[test]
    fn buffer_dump_round_trips_with_priorities() {
        let spec = spec2();
        let d = collect(&spec, Tier::Medium, 1, 5);
        let bundle = WorldModelBundle::new(spec.clone(), 16, 8, 4);
        let policy = ZeroPolicy { action_dim: spec.action_dim };
        let buf = generate_rollouts(&bundle, &policy, &d, &RolloutConfig::new(2, 5, 0.1, 1.0), 6);
        let ds = buffer_to_dataset(&buf, &spec);
        assert_eq!(ds.provenance, Provenance::Synthetic);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synthetic.logo");
        crate::dataset::save(&ds, &path).unwrap();
        let back = crate::dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert!(back.transitions.iter().all(|t| t.priority.is_some()));
    }

    #[test]
    fn calibration_is_reproducible_from_logged_uncertainties() {
        let spec = spec2();
        let d = collect(&spec, Tier::Medium, 2, 6);
        let bundle = WorldModelBundle::new(spec.clone(), 16, 8, 5);
        let c = calibrate_c(&bundle, &d).unwrap();
        let u = crate::world::uncertainties(&bundle, &d);
        assert_eq!(c, clip_from_uncertainties(&u));
        assert!(c > 0.0);
    }
}
