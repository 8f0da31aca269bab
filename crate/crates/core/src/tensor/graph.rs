//! Define-then-run computation tape.
//!
//! A graph is built once from named leaves and op nodes, then evaluated many
//! times against fresh bindings. Node ids are indices into the op vector and
//! are topologically ordered by construction; backward replays the tape in
//! exact reverse order, so two runs on identical state produce bitwise-equal
//! gradients.

use std::collections::BTreeMap;

use super::{Array, TensorError};

pub type NodeId = usize;

/// Leaf name to value map. `BTreeMap` keeps iteration deterministic.
pub type Bindings = BTreeMap<String, Array>;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: String, trainable: bool },
    /// y = x·W + b with W: [in, out], b: [out], x: [in] or [rows, in].
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Tanh(NodeId),
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Concatenation along the last axis; inputs share all leading dims.
    Concat(Vec<NodeId>),
    /// Slice along the last axis.
    Slice { x: NodeId, start: usize, len: usize },
    Sum(NodeId),
    Mean(NodeId),
    /// Sum of squared elements (no batch normalization).
    SquaredL2(NodeId),
    /// Diagonal-Gaussian negative log-likelihood, summed over coordinates
    /// and averaged over rows.
    GaussNll { mean: NodeId, log_std: NodeId, target: NodeId },
    /// mean + exp(log_std) ⊙ noise; the differentiable sampling path.
    Reparam { mean: NodeId, log_std: NodeId, noise: NodeId },
    /// Row-wise softmax.
    Softmax(NodeId),
    Clip { x: NodeId, lo: f64, hi: f64 },
    StopGrad(NodeId),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SquaredL2(_) => "squared_l2",
            Op::GaussNll { .. } => "gauss_nll",
            Op::Reparam { .. } => "reparam",
            Op::Softmax(_) => "softmax",
            Op::Clip { .. } => "clip",
            Op::StopGrad(_) => "stop_grad",
        }
    }
}

#[derive(Debug, Default)]
pub struct TapeGraph {
    ops: Vec<Op>,
    leaves: BTreeMap<String, NodeId>,
    output: Option<NodeId>,
    values: Vec<Array>,
    frozen_stops: Option<Vec<Option<Array>>>,
}

impl TapeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let id = self.ops.len();
        self.ops.push(op);
        id
    }

    fn leaf(&mut self, name: &str, trainable: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            match &self.ops[id] {
                Op::Leaf { trainable: t, .. } if *t == trainable => return id,
                _ => panic!("leaf `{name}` re-registered with a different trainable flag"),
            }
        }
        let id = self.push(Op::Leaf { name: name.to_string(), trainable });
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Non-trainable leaf (data, noise, constants bound per call).
    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, false)
    }

    /// Trainable leaf; backward reports its gradient. Registering the same
    /// name twice returns the existing node, which is how weights are shared
    /// between branches of one graph.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(name, true)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine { x, w, b })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(x, factor))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::Concat(xs.to_vec()))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice { x, start, len })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    pub fn squared_l2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SquaredL2(x))
    }

    pub fn gauss_nll(&mut self, mean: NodeId, log_std: NodeId, target: NodeId) -> NodeId {
        self.push(Op::GaussNll { mean, log_std, target })
    }

    pub fn reparam(&mut self, mean: NodeId, log_std: NodeId, noise: NodeId) -> NodeId {
        self.push(Op::Reparam { mean, log_std, noise })
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    pub fn clip(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clip { x, lo, hi })
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        self.push(Op::StopGrad(x))
    }

    /// Pins every stop_grad node at its value from the last forward, so
    /// later forwards treat those branches as constants. The backward pass
    /// differentiates exactly that function, which is what makes a
    /// finite-difference comparison against it meaningful.
    pub fn freeze_stop_grads(&mut self) {
        assert_eq!(self.values.len(), self.ops.len(), "freeze requires a completed forward");
        let frozen = self
            .ops
            .iter()
            .enumerate()
            .map(|(id, op)| match op {
                Op::StopGrad(_) => Some(self.values[id].clone()),
                _ => None,
            })
            .collect();
        self.frozen_stops = Some(frozen);
    }

    /// Undoes `freeze_stop_grads`.
    pub fn thaw_stop_grads(&mut self) {
        self.frozen_stops = None;
    }

    pub fn set_output(&mut self, id: NodeId) {
        assert!(id < self.ops.len(), "output id out of range");
        self.output = Some(id);
    }

    /// Names of all trainable leaves, sorted.
    pub fn trainable_leaf_names(&self) -> Vec<String> {
        self.leaves
            .iter()
            .filter(|(_, &id)| matches!(self.ops[id], Op::Leaf { trainable: true, .. }))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Value of an interior node after the last forward; used to read loss
    /// components out of a combined objective without re-evaluation.
    pub fn node_value(&self, id: NodeId) -> Option<&Array> {
        self.values.get(id)
    }

    fn node_label(&self, id: NodeId) -> String {
        match &self.ops[id] {
            Op::Leaf { name, .. } => format!("node {id} (leaf `{name}`)"),
            op => format!("node {id} ({})", op.kind()),
        }
    }

    fn mismatch(&self, id: NodeId, detail: String) -> TensorError {
        TensorError::ShapeMismatch { node: self.node_label(id), detail }
    }

    fn lookup<'a>(&self, name: &str, sources: &[&'a Bindings]) -> Option<&'a Array> {
        sources.iter().find_map(|b| b.get(name))
    }

    /// Evaluates the tape against leaf bindings (later sources shadow earlier
    /// ones are not allowed; first match wins). Returns the output value.
    pub fn forward(&mut self, sources: &[&Bindings]) -> Result<Array, TensorError> {
        let out_id = self.output.ok_or(TensorError::NoOutput)?;
        let mut values: Vec<Array> = Vec::with_capacity(self.ops.len());
        for id in 0..self.ops.len() {
            let v = self.eval_node(id, &values, sources)?;
            if !v.all_finite() {
                return Err(TensorError::NonFinite { node: self.node_label(id) });
            }
            values.push(v);
        }
        self.values = values;
        Ok(self.values[out_id].clone())
    }

    fn eval_node(
        &self,
        id: NodeId,
        values: &[Array],
        sources: &[&Bindings],
    ) -> Result<Array, TensorError> {
        let op = &self.ops[id];
        match op {
            Op::Leaf { name, .. } => self
                .lookup(name, sources)
                .cloned()
                .ok_or_else(|| TensorError::MissingBinding(name.clone())),
            Op::Affine { x, w, b } => {
                let (xv, wv, bv) = (&values[*x], &values[*w], &values[*b]);
                if wv.rank() != 2 {
                    return Err(self.mismatch(id, format!("weight must be rank 2, got {:?}", wv.shape())));
                }
                let (in_dim, out_dim) = (wv.shape()[0], wv.shape()[1]);
                if bv.numel() != out_dim {
                    return Err(self.mismatch(
                        id,
                        format!("bias has {} elements, expected {out_dim}", bv.numel()),
                    ));
                }
                let (rows, cols) = xv.row_view();
                if cols != in_dim {
                    return Err(self.mismatch(
                        id,
                        format!("input width {cols} vs weight in-dim {in_dim}"),
                    ));
                }
                let mut out = vec![0.0; rows * out_dim];
                matmul_add_bias(xv.data(), wv.data(), bv.data(), &mut out, rows, in_dim, out_dim);
                let shape: Vec<usize> =
                    if xv.rank() == 2 { vec![rows, out_dim] } else { vec![out_dim] };
                Array::from_vec(&shape, out)
            }
            Op::Tanh(x) => Ok(map_unary(&values[*x], f64::tanh)),
            Op::Relu(x) => Ok(map_unary(&values[*x], |v| if v > 0.0 { v } else { 0.0 })),
            Op::Add(a, b) => self.zip(id, &values[*a], &values[*b], |x, y| x + y),
            Op::Sub(a, b) => self.zip(id, &values[*a], &values[*b], |x, y| x - y),
            Op::Mul(a, b) => self.zip(id, &values[*a], &values[*b], |x, y| x * y),
            Op::Scale(x, c) => Ok(map_unary(&values[*x], |v| v * c)),
            Op::Concat(xs) => {
                let parts: Vec<&Array> = xs.iter().map(|&i| &values[i]).collect();
                if parts.is_empty() {
                    return Err(self.mismatch(id, "empty concat".into()));
                }
                let rank = parts[0].rank();
                let rows = parts[0].row_view().0;
                for p in &parts {
                    if p.rank() != rank || p.row_view().0 != rows {
                        return Err(self.mismatch(
                            id,
                            format!("inputs disagree on leading shape: {:?}", p.shape()),
                        ));
                    }
                }
                let total: usize = parts.iter().map(|p| p.row_view().1).sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in &parts {
                        let w = p.row_view().1;
                        data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
                    }
                }
                let shape: Vec<usize> = if rank == 2 { vec![rows, total] } else { vec![total] };
                Array::from_vec(&shape, data)
            }
            Op::Slice { x, start, len } => {
                let xv = &values[*x];
                let (rows, cols) = xv.row_view();
                if start + len > cols {
                    return Err(self.mismatch(
                        id,
                        format!("slice {start}..{} exceeds width {cols}", start + len),
                    ));
                }
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    data.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
                }
                let shape: Vec<usize> = if xv.rank() == 2 { vec![rows, *len] } else { vec![*len] };
                Array::from_vec(&shape, data)
            }
            Op::Sum(x) => Ok(Array::scalar(values[*x].data().iter().sum())),
            Op::Mean(x) => {
                let v = &values[*x];
                Ok(Array::scalar(v.data().iter().sum::<f64>() / v.numel() as f64))
            }
            Op::SquaredL2(x) => {
                Ok(Array::scalar(values[*x].data().iter().map(|v| v * v).sum()))
            }
            Op::GaussNll { mean, log_std, target } => {
                let (m, l, t) = (&values[*mean], &values[*log_std], &values[*target]);
                if m.shape() != l.shape() || m.shape() != t.shape() {
                    return Err(self.mismatch(
                        id,
                        format!(
                            "mean {:?}, log_std {:?}, target {:?} must match",
                            m.shape(),
                            l.shape(),
                            t.shape()
                        ),
                    ));
                }
                let rows = m.row_view().0 as f64;
                let mut nll = 0.0;
                for i in 0..m.numel() {
                    let d = t.data()[i] - m.data()[i];
                    let ls = l.data()[i];
                    nll += 0.5 * LN_2PI + ls + 0.5 * d * d * (-2.0 * ls).exp();
                }
                Ok(Array::scalar(nll / rows))
            }
            Op::Reparam { mean, log_std, noise } => {
                let (m, l, e) = (&values[*mean], &values[*log_std], &values[*noise]);
                if m.shape() != l.shape() || m.shape() != e.shape() {
                    return Err(self.mismatch(
                        id,
                        format!(
                            "mean {:?}, log_std {:?}, noise {:?} must match",
                            m.shape(),
                            l.shape(),
                            e.shape()
                        ),
                    ));
                }
                let data = (0..m.numel())
                    .map(|i| m.data()[i] + l.data()[i].exp() * e.data()[i])
                    .collect();
                Array::from_vec(m.shape(), data)
            }
            Op::Softmax(x) => {
                let xv = &values[*x];
                let (rows, cols) = xv.row_view();
                let mut data = vec![0.0; xv.numel()];
                for r in 0..rows {
                    let row = &xv.data()[r * cols..(r + 1) * cols];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for c in 0..cols {
                        let e = (row[c] - max).exp();
                        data[r * cols + c] = e;
                        z += e;
                    }
                    for c in 0..cols {
                        data[r * cols + c] /= z;
                    }
                }
                Array::from_vec(xv.shape(), data)
            }
            Op::Clip { x, lo, hi } => Ok(map_unary(&values[*x], |v| v.clamp(*lo, *hi))),
            Op::StopGrad(x) => {
                if let Some(pinned) = self.frozen_stops.as_ref().and_then(|f| f[id].as_ref()) {
                    return Ok(pinned.clone());
                }
                Ok(values[*x].clone())
            }
        }
    }

    fn zip(
        &self,
        id: NodeId,
        a: &Array,
        b: &Array,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array, TensorError> {
        if a.shape() != b.shape() {
            return Err(self.mismatch(id, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::from_vec(a.shape(), data)
    }

    /// Reverse pass over the last forward. Returns one gradient array per
    /// trainable leaf present in the graph (zeros if the output does not
    /// depend on it). Gradients are never accumulated into non-trainable
    /// leaves.
    pub fn backward(&self) -> Result<Bindings, TensorError> {
        let out_id = self.output.ok_or(TensorError::NoOutput)?;
        if self.values.len() != self.ops.len() {
            return Err(TensorError::NotEvaluated);
        }
        let out = &self.values[out_id];
        if !out.is_scalar() {
            return Err(TensorError::NonScalarOutput(out.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.ops.len()];
        grads[out_id] = Some(vec![1.0]);

        for id in (0..self.ops.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            if matches!(self.ops[id], Op::Leaf { trainable: true, .. }) {
                grads[id] = Some(g);
            }
        }

        let mut out = Bindings::new();
        for (name, &id) in &self.leaves {
            if let Op::Leaf { trainable: true, .. } = self.ops[id] {
                let shape = self.values[id].shape().to_vec();
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; self.values[id].numel()]);
                out.insert(name.clone(), Array::from_vec(&shape, g)?);
            }
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], child: NodeId, contrib: &[f64]) {
        if let Op::Leaf { trainable: false, .. } = self.ops[child] {
            return;
        }
        match &mut grads[child] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => grads[child] = Some(contrib.to_vec()),
        }
    }

    fn backprop_node(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.ops[id] {
            Op::Leaf { .. } => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (&self.values[*x], &self.values[*w]);
                let (in_dim, out_dim) = (wv.shape()[0], wv.shape()[1]);
                let (rows, _) = xv.row_view();

                let mut dx = vec![0.0; rows * in_dim];
                for r in 0..rows {
                    let grow = &g[r * out_dim..(r + 1) * out_dim];
                    let dxrow = &mut dx[r * in_dim..(r + 1) * in_dim];
                    for k in 0..in_dim {
                        let wrow = &wv.data()[k * out_dim..(k + 1) * out_dim];
                        let mut acc = 0.0;
                        for o in 0..out_dim {
                            acc += grow[o] * wrow[o];
                        }
                        dxrow[k] = acc;
                    }
                }
                self.accum(grads, *x, &dx);

                let mut dw = vec![0.0; in_dim * out_dim];
                for r in 0..rows {
                    let xrow = &xv.data()[r * in_dim..(r + 1) * in_dim];
                    let grow = &g[r * out_dim..(r + 1) * out_dim];
                    for k in 0..in_dim {
                        let xk = xrow[k];
                        let dwrow = &mut dw[k * out_dim..(k + 1) * out_dim];
                        for o in 0..out_dim {
                            dwrow[o] += xk * grow[o];
                        }
                    }
                }
                self.accum(grads, *w, &dw);

                let mut db = vec![0.0; out_dim];
                for r in 0..rows {
                    for o in 0..out_dim {
                        db[o] += g[r * out_dim + o];
                    }
                }
                self.accum(grads, *b, &db);
            }
            Op::Tanh(x) => {
                let y = &self.values[id];
                let dx: Vec<f64> =
                    g.iter().zip(y.data()).map(|(&gi, &yi)| gi * (1.0 - yi * yi)).collect();
                self.accum(grads, *x, &dx);
            }
            Op::Relu(x) => {
                let xv = &self.values[*x];
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                self.accum(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.values[*a], &self.values[*b]);
                let da: Vec<f64> = g.iter().zip(bv.data()).map(|(&gi, &bi)| gi * bi).collect();
                let db: Vec<f64> = g.iter().zip(av.data()).map(|(&gi, &ai)| gi * ai).collect();
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|&v| v * c).collect();
                self.accum(grads, *x, &dx);
            }
            Op::Concat(xs) => {
                let parts: Vec<&Array> = xs.iter().map(|&i| &self.values[i]).collect();
                let rows = parts[0].row_view().0;
                let total: usize = parts.iter().map(|p| p.row_view().1).sum();
                let mut offset = 0;
                for (p, &pid) in parts.iter().zip(xs) {
                    let w = p.row_view().1;
                    let mut dp = vec![0.0; p.numel()];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    self.accum(grads, pid, &dp);
                    offset += w;
                }
            }
            Op::Slice { x, start, len } => {
                let xv = &self.values[*x];
                let (rows, cols) = xv.row_view();
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accum(grads, *x, &dx);
            }
            Op::Sum(x) => {
                let n = self.values[*x].numel();
                self.accum(grads, *x, &vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.values[*x].numel();
                self.accum(grads, *x, &vec![g[0] / n as f64; n]);
            }
            Op::SquaredL2(x) => {
                let xv = &self.values[*x];
                let dx: Vec<f64> = xv.data().iter().map(|&v| 2.0 * v * g[0]).collect();
                self.accum(grads, *x, &dx);
            }
            Op::GaussNll { mean, log_std, target } => {
                let (m, l, t) = (&self.values[*mean], &self.values[*log_std], &self.values[*target]);
                let rows = m.row_view().0 as f64;
                let scale = g[0] / rows;
                let n = m.numel();
                let mut dm = vec![0.0; n];
                let mut dl = vec![0.0; n];
                let mut dt = vec![0.0; n];
                for i in 0..n {
                    let d = t.data()[i] - m.data()[i];
                    let inv_var = (-2.0 * l.data()[i]).exp();
                    dm[i] = -d * inv_var * scale;
                    dl[i] = (1.0 - d * d * inv_var) * scale;
                    dt[i] = d * inv_var * scale;
                }
                self.accum(grads, *mean, &dm);
                self.accum(grads, *log_std, &dl);
                self.accum(grads, *target, &dt);
            }
            Op::Reparam { mean, log_std, noise } => {
                let (l, e) = (&self.values[*log_std], &self.values[*noise]);
                self.accum(grads, *mean, g);
                let dl: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * l.data()[i].exp() * e.data()[i])
                    .collect();
                self.accum(grads, *log_std, &dl);
            }
            Op::Softmax(x) => {
                let y = &self.values[id];
                let (rows, cols) = y.row_view();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..rows {
                    let yrow = &y.data()[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yi, &gi)| yi * gi).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yrow[c] * (grow[c] - dot);
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::Clip { x, lo, hi } => {
                let xv = &self.values[*x];
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| if xi > *lo && xi < *hi { gi } else { 0.0 })
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::StopGrad(_) => {}
        }
    }
}

/// out[r, :] = bias + Σ_k x[r, k] · w[k, :], laid out for sequential access.
/// Shared by the tape and the plain inference path so the two agree bitwise.
pub(crate) fn matmul_add_bias(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    out: &mut [f64],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
) {
    for r in 0..rows {
        let xrow = &x[r * in_dim..(r + 1) * in_dim];
        let orow = &mut out[r * out_dim..(r + 1) * out_dim];
        orow.copy_from_slice(bias);
        for k in 0..in_dim {
            let xk = xrow[k];
            let wrow = &w[k * out_dim..(k + 1) * out_dim];
            for o in 0..out_dim {
                orow[o] += xk * wrow[o];
            }
        }
    }
}

fn map_unary(x: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array::from_vec(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}
