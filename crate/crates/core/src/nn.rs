//! Parameter stores and MLP builders over the tape.
//!
//! Every network in the crate is a feed-forward stack of affine layers with
//! tanh hidden activations. An [`MlpDef`] owns only names and sizes; values
//! live in a [`ParamStore`]. The same definition can register its layers
//! into a [`TapeGraph`] (training) or run directly against the store
//! (inference) — both paths share one matmul kernel, so they agree bitwise.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::tensor::{Array, Bindings, NodeId, TapeGraph};

/// Clamp range for learned per-dimension Gaussian log-stds.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Named parameter arrays. A thin wrapper over [`Bindings`] so stores can be
/// saved, loaded, and handed to graphs as a binding source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: Bindings,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bindings(&self) -> &Bindings {
        &self.map
    }

    pub fn bindings_mut(&mut self) -> &mut Bindings {
        &mut self.map
    }

    pub fn insert(&mut self, name: &str, value: Array) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.map.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Array::numel).sum()
    }
}

/// Feed-forward network definition: `dims = [in, hidden.., out]`, tanh on
/// hidden layers, optional tanh on the output (action squashing).
#[derive(Debug, Clone)]
pub struct MlpDef {
    prefix: String,
    dims: Vec<usize>,
    final_tanh: bool,
}

impl MlpDef {
    pub fn new(prefix: &str, dims: &[usize], final_tanh: bool) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        assert!(dims.iter().all(|&d| d > 0), "dims must be positive");
        MlpDef { prefix: prefix.to_string(), dims: dims.to_vec(), final_tanh }
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn layer_names(&self, layer: usize) -> (String, String) {
        (format!("{}/w{layer}", self.prefix), format!("{}/b{layer}", self.prefix))
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.dims.len() - 1)
            .flat_map(|l| {
                let (w, b) = self.layer_names(l);
                [w, b]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|d| (d[0] + 1) * d[1]).sum()
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        for (l, d) in self.dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (d[0], d[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> =
                (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let (wn, bn) = self.layer_names(l);
            store.insert(&wn, Array::from_vec(&[fan_in, fan_out], w).unwrap());
            store.insert(&bn, Array::zeros(&[fan_out]));
        }
    }

    /// Registers the layers on `graph` (sharing params across repeat builds)
    /// and returns the output node.
    pub fn build(&self, graph: &mut TapeGraph, x: NodeId) -> NodeId {
        self.build_leaves(graph, x, true)
    }

    /// Like [`MlpDef::build`] but registers the weights as fixed inputs, so
    /// gradients flow through this network without reaching its parameters.
    /// Used where one network appears inside another network's objective.
    pub fn build_frozen(&self, graph: &mut TapeGraph, x: NodeId) -> NodeId {
        self.build_leaves(graph, x, false)
    }

    fn build_leaves(&self, graph: &mut TapeGraph, x: NodeId, trainable: bool) -> NodeId {
        let mut h = x;
        let layers = self.dims.len() - 1;
        for l in 0..layers {
            let (wn, bn) = self.layer_names(l);
            let (w, b) = if trainable {
                (graph.param(&wn), graph.param(&bn))
            } else {
                (graph.input(&wn), graph.input(&bn))
            };
            h = graph.affine(h, w, b);
            if l + 1 < layers || self.final_tanh {
                h = graph.tanh(h);
            }
        }
        h
    }

    /// Plain single-row forward against the store.
    pub fn forward1(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim(), "{}: bad input width", self.prefix);
        let input = Array::from_vec(&[1, x.len()], x.to_vec()).unwrap();
        let out = self.forward_batch(store, &input);
        out.data().to_vec()
    }

    /// Plain batch forward: `x` is `[rows, in_dim]`.
    pub fn forward_batch(&self, store: &ParamStore, x: &Array) -> Array {
        let (rows, cols) = x.row_view();
        assert_eq!(cols, self.in_dim(), "{}: bad input width", self.prefix);
        let mut h = x.data().to_vec();
        let mut width = cols;
        let layers = self.dims.len() - 1;
        for l in 0..layers {
            let (wn, bn) = self.layer_names(l);
            let w = store.get(&wn).unwrap_or_else(|| panic!("missing param {wn}"));
            let b = store.get(&bn).unwrap_or_else(|| panic!("missing param {bn}"));
            let out_dim = w.shape()[1];
            let mut out = vec![0.0; rows * out_dim];
            crate::tensor::matmul_add_bias(&h, w.data(), b.data(), &mut out, rows, width, out_dim);
            if l + 1 < layers || self.final_tanh {
                for v in &mut out {
                    *v = v.tanh();
                }
            }
            h = out;
            width = out_dim;
        }
        Array::from_vec(&[rows, width], h).unwrap()
    }
}

/// Splits a `2·dim`-wide head into (mean, clamped log-std) graph nodes.
pub fn gaussian_nodes(graph: &mut TapeGraph, raw: NodeId, dim: usize) -> (NodeId, NodeId) {
    let mean = graph.slice(raw, 0, dim);
    let log_std_raw = graph.slice(raw, dim, dim);
    let log_std = graph.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX);
    (mean, log_std)
}

/// Plain counterpart of [`gaussian_nodes`] for one row.
pub fn split_gaussian(raw: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(raw.len(), 2 * dim);
    let mean = raw[..dim].to_vec();
    let log_std = raw[dim..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
    (mean, log_std)
}

/// Largest hidden width `w` such that a 2-hidden-layer MLP
/// `in → w → w → out` stays within `budget` scalar parameters.
pub fn width_for_budget(in_dim: usize, out_dim: usize, budget: usize) -> usize {
    let count = |w: usize| (in_dim + 1) * w + (w + 1) * w + (w + 1) * out_dim;
    let mut w = 1;
    while count(w + 1) <= budget {
        w += 1;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn param_count_matches_init() {
        let def = MlpDef::new("net", &[4, 8, 8, 3], false);
        let mut store = ParamStore::new();
        def.init(&mut store, &mut derive_rng(0, "t"));
        assert_eq!(store.scalar_count(), def.param_count());
        assert_eq!(def.param_count(), (4 + 1) * 8 + (8 + 1) * 8 + (8 + 1) * 3);
    }

    #[test]
    fn graph_and_plain_forward_agree_bitwise() {
        let def = MlpDef::new("net", &[3, 16, 16, 2], true);
        let mut store = ParamStore::new();
        def.init(&mut store, &mut derive_rng(1, "t"));

        let x = Array::from_vec(&[2, 3], vec![0.1, -0.4, 0.7, 0.9, 0.2, -0.3]).unwrap();
        let plain = def.forward_batch(&store, &x);

        let mut g = TapeGraph::new();
        let xin = g.input("x");
        let out = def.build(&mut g, xin);
        g.set_output(out);
        let mut inputs = Bindings::new();
        inputs.insert("x".into(), x);
        let graph_out = g.forward(&[store.bindings(), &inputs]).unwrap();

        assert_eq!(plain, graph_out);
    }

    #[test]
    fn final_tanh_keeps_outputs_in_the_action_box() {
        let def = MlpDef::new("pi", &[4, 8, 8, 2], true);
        let mut store = ParamStore::new();
        def.init(&mut store, &mut derive_rng(2, "t"));
        for trial in 0..20 {
            let x: Vec<f64> = (0..4).map(|i| ((trial * 4 + i) as f64).sin() * 5.0).collect();
            let out = def.forward1(&store, &x);
            assert!(out.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn split_gaussian_clamps_log_std() {
        let raw = vec![1.0, 2.0, -9.0, 7.0];
        let (mean, log_std) = split_gaussian(&raw, 2);
        assert_eq!(mean, vec![1.0, 2.0]);
        assert_eq!(log_std, vec![LOG_STD_MIN, LOG_STD_MAX]);
    }

    #[test]
    fn width_for_budget_is_tight() {
        let budget = 330_000;
        let w = width_for_budget(16, 24, budget);
        let count = |w: usize| (16 + 1) * w + (w + 1) * w + (w + 1) * 24;
        assert!(count(w) <= budget);
        assert!(count(w + 1) > budget);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let def = MlpDef::new("net", &[5, 7, 2], false);
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        def.init(&mut a, &mut derive_rng(9, "x"));
        def.init(&mut b, &mut derive_rng(9, "x"));
        assert_eq!(a, b);
    }
}
