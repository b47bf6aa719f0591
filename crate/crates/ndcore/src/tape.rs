//! Operation tape: forward evaluation plus reverse-mode gradients.
//!
//! Every op validates shapes, computes its result eagerly, and records a step.
//! [`Tape::backward`] replays the steps in reverse, accumulating vector-Jacobian
//! products. Gradients of intermediates stay on the tape; gradients of leaves
//! flagged `requires_grad` are additionally written into the leaf arrays so
//! callers can read them after the pass.

use crate::array::DiffArray;
use crate::error::{NdError, Result};

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise map applied by [`Tape::pointwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pointwise {
    Sigmoid,
    Log,
    Exp,
    Negate,
    Scale(f64),
    Gelu,
    Clamp { lo: f64, hi: f64 },
}

/// Reduction kind for [`Tape::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

/// Sentinel index in a reindex map: the output element is 0 and no gradient
/// flows back through it.
pub const REINDEX_ZERO: usize = usize::MAX;

#[derive(Debug, Clone)]
enum Step {
    Matmul { a: usize, b: usize, out: usize },
    Transpose { x: usize, out: usize },
    SoftmaxRows { x: usize, out: usize },
    LogSoftmaxRows { x: usize, out: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64, out: usize },
    Hadamard { a: usize, b: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    AddRow { x: usize, row: usize, out: usize },
    Pointwise { x: usize, kind: Pointwise, out: usize },
    Reduce { x: usize, kind: Reduce, axis: Option<usize>, out: usize },
    Reshape { x: usize, out: usize },
    Reindex { x: usize, map: Box<[usize]>, out: usize },
    SegmentMax { x: usize, argmax: Box<[usize]>, out: usize },
}

/// Records an op sequence over an arena of arrays.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<DiffArray>,
    grads: Vec<Option<Vec<f64>>>,
    steps: Vec<Step>,
    /// Whether a gradient must be propagated into each node: true for
    /// gradient leaves and anything computed from one. Backward skips
    /// vector-Jacobian products into nodes that never need one.
    needs: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Insert an array as a leaf. Its `requires_grad` flag decides whether
    /// `backward` populates its gradient buffer.
    pub fn leaf(&mut self, arr: DiffArray) -> Var {
        self.needs.push(arr.requires_grad());
        self.nodes.push(arr);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        Ok(self.leaf(DiffArray::new(values, shape)?))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(DiffArray::scalar(v))
    }

    pub fn value(&self, v: Var) -> &DiffArray {
        &self.nodes[v.0]
    }

    /// Gradient left on a node by the most recent backward pass. Leaves keep
    /// theirs; an intermediate's buffer is consumed by the step that produced
    /// it once no later step can read it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    fn push(&mut self, arr: DiffArray, step: impl FnOnce(usize) -> Step) -> Var {
        self.nodes.push(arr);
        self.grads.push(None);
        let out = self.nodes.len() - 1;
        let step = step(out);
        self.needs.push(step_inputs(&step).iter().any(|&i| self.needs[i]));
        self.steps.push(step);
        Var(out)
    }

    // ---- ops ------------------------------------------------------------

    /// Matrix product of `a: [m,k]` and `b: [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.nodes[a.0].dims2()?;
        let (kb, n) = self.nodes[b.0].dims2()?;
        if ka != kb {
            return Err(NdError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape().to_vec(),
                rhs: self.nodes[b.0].shape().to_vec(),
            });
        }
        let av = self.nodes[a.0].values();
        let bv = self.nodes[b.0].values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for t in 0..ka {
                let ait = av[i * ka + t];
                if ait == 0.0 {
                    continue;
                }
                let brow = &bv[t * n..(t + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += ait * brow[j];
                }
            }
        }
        let arr = DiffArray::new(out, vec![m, n])?;
        Ok(self.push(arr, |out| Step::Matmul { a: a.0, b: b.0, out }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.nodes[x.0].dims2()?;
        let xv = self.nodes[x.0].values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let arr = DiffArray::new(out, vec![c, r])?;
        Ok(self.push(arr, |out| Step::Transpose { x: x.0, out }))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.nodes[x.0].dims2()?;
        if !self.nodes[x.0].is_finite() {
            return Err(NdError::Numeric("softmax over non-finite input".into()));
        }
        let xv = self.nodes[x.0].values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let arr = DiffArray::new(out, vec![r, c])?;
        Ok(self.push(arr, |out| Step::SoftmaxRows { x: x.0, out }))
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.nodes[x.0].dims2()?;
        if !self.nodes[x.0].is_finite() {
            return Err(NdError::Numeric("log_softmax over non-finite input".into()));
        }
        let xv = self.nodes[x.0].values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for j in 0..c {
                out[i * c + j] = row[j] - logsum;
            }
        }
        let arr = DiffArray::new(out, vec![r, c])?;
        Ok(self.push(arr, |out| Step::LogSoftmaxRows { x: x.0, out }))
    }

    /// Per-row normalization of `x: [n,d]` followed by elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.nodes[x.0].dims2()?;
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.nodes[v.0].shape() != [d] {
                return Err(NdError::ShapeMismatch {
                    op: if name == "gain" { "layer_norm gain" } else { "layer_norm bias" },
                    lhs: vec![n, d],
                    rhs: self.nodes[v.0].shape().to_vec(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(NdError::Invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.nodes[x.0].values();
        let gv = self.nodes[gain.0].values();
        let bv = self.nodes[bias.0].values();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let arr = DiffArray::new(out, vec![n, d])?;
        Ok(self.push(arr, |out| Step::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            eps,
            out,
        }))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, false)
    }

    fn elementwise(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        if self.nodes[a.0].shape() != self.nodes[b.0].shape() {
            return Err(NdError::ShapeMismatch {
                op: if mul { "hadamard" } else { "add" },
                lhs: self.nodes[a.0].shape().to_vec(),
                rhs: self.nodes[b.0].shape().to_vec(),
            });
        }
        let av = self.nodes[a.0].values();
        let bv = self.nodes[b.0].values();
        let out: Vec<f64> = if mul {
            av.iter().zip(bv).map(|(x, y)| x * y).collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        };
        let shape = self.nodes[a.0].shape().to_vec();
        let arr = DiffArray::new(out, shape)?;
        Ok(self.push(arr, |out| {
            if mul {
                Step::Hadamard { a: a.0, b: b.0, out }
            } else {
                Step::Add { a: a.0, b: b.0, out }
            }
        }))
    }

    /// Broadcast-add a `[d]` row vector to every row of `x: [n,d]`. The only
    /// broadcast the engine supports.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, d) = self.nodes[x.0].dims2()?;
        if self.nodes[row.0].shape() != [d] {
            return Err(NdError::ShapeMismatch {
                op: "add_row",
                lhs: vec![n, d],
                rhs: self.nodes[row.0].shape().to_vec(),
            });
        }
        let xv = self.nodes[x.0].values();
        let rv = self.nodes[row.0].values();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = xv[i * d + j] + rv[j];
            }
        }
        let arr = DiffArray::new(out, vec![n, d])?;
        Ok(self.push(arr, |out| Step::AddRow { x: x.0, row: row.0, out }))
    }

    pub fn pointwise(&mut self, x: Var, kind: Pointwise) -> Result<Var> {
        let xv = self.nodes[x.0].values();
        if let Pointwise::Log = kind {
            if let Some(v) = xv.iter().find(|v| **v <= 0.0) {
                return Err(NdError::Numeric(format!("log of nonpositive value {v}")));
            }
        }
        if let Pointwise::Clamp { lo, hi } = kind {
            if lo > hi {
                return Err(NdError::Invalid(format!("clamp bounds inverted: [{lo}, {hi}]")));
            }
        }
        let out: Vec<f64> = xv
            .iter()
            .map(|&v| match kind {
                Pointwise::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                Pointwise::Log => v.ln(),
                Pointwise::Exp => v.exp(),
                Pointwise::Negate => -v,
                Pointwise::Scale(c) => c * v,
                Pointwise::Gelu => gelu(v),
                Pointwise::Clamp { lo, hi } => v.clamp(lo, hi),
            })
            .collect();
        let shape = self.nodes[x.0].shape().to_vec();
        let arr = DiffArray::new(out, shape)?;
        Ok(self.push(arr, |out| Step::Pointwise { x: x.0, kind, out }))
    }

    /// Sum or mean over the whole array (`axis: None`, scalar result) or
    /// along one axis of a rank-1/rank-2 array (the axis is dropped).
    pub fn reduce(&mut self, x: Var, kind: Reduce, axis: Option<usize>) -> Result<Var> {
        let shape = self.nodes[x.0].shape().to_vec();
        let xv = self.nodes[x.0].values();
        let (out, out_shape) = match axis {
            None => {
                let s: f64 = xv.iter().sum();
                let v = match kind {
                    Reduce::Sum => s,
                    Reduce::Mean => s / xv.len() as f64,
                };
                (vec![v], vec![1])
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(NdError::BadAxis { axis: ax, rank: shape.len() });
                }
                match shape.as_slice() {
                    &[_n] => {
                        let s: f64 = xv.iter().sum();
                        let v = match kind {
                            Reduce::Sum => s,
                            Reduce::Mean => s / xv.len() as f64,
                        };
                        (vec![v], vec![1])
                    }
                    &[n, d] => {
                        if ax == 0 {
                            let mut acc = vec![0.0; d];
                            for i in 0..n {
                                for j in 0..d {
                                    acc[j] += xv[i * d + j];
                                }
                            }
                            if kind == Reduce::Mean {
                                acc.iter_mut().for_each(|v| *v /= n as f64);
                            }
                            (acc, vec![d])
                        } else {
                            let mut acc = vec![0.0; n];
                            for i in 0..n {
                                acc[i] = xv[i * d..(i + 1) * d].iter().sum();
                            }
                            if kind == Reduce::Mean {
                                acc.iter_mut().for_each(|v| *v /= d as f64);
                            }
                            (acc, vec![n])
                        }
                    }
                    _ => {
                        return Err(NdError::Invalid(format!(
                            "axis reduction needs rank 1 or 2, got shape {shape:?}"
                        )))
                    }
                }
            }
        };
        let arr = DiffArray::new(out, out_shape)?;
        Ok(self.push(arr, |out| Step::Reduce { x: x.0, kind, axis, out }))
    }

    pub fn reshape(&mut self, x: Var, new_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x.0].numel() {
            return Err(NdError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape().to_vec(),
                rhs: new_shape,
            });
        }
        let arr = DiffArray::new(self.nodes[x.0].values().to_vec(), new_shape)?;
        Ok(self.push(arr, |out| Step::Reshape { x: x.0, out }))
    }

    /// Gather by flat index: `out[j] = x[map[j]]`, or 0 where `map[j]` is
    /// [`REINDEX_ZERO`]. Repeated indices accumulate gradient.
    pub fn reindex(&mut self, x: Var, map: Vec<usize>, out_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = out_shape.iter().product();
        if numel != map.len() {
            return Err(NdError::Invalid(format!(
                "reindex map has {} entries but output shape {:?} expects {}",
                map.len(),
                out_shape,
                numel
            )));
        }
        let n = self.nodes[x.0].numel();
        if let Some(bad) = map.iter().find(|&&m| m != REINDEX_ZERO && m >= n) {
            return Err(NdError::Invalid(format!(
                "reindex entry {bad} out of range for {n} source elements"
            )));
        }
        let xv = self.nodes[x.0].values();
        let out: Vec<f64> = map
            .iter()
            .map(|&m| if m == REINDEX_ZERO { 0.0 } else { xv[m] })
            .collect();
        let arr = DiffArray::new(out, out_shape)?;
        Ok(self.push(arr, |out| Step::Reindex {
            x: x.0,
            map: map.into_boxed_slice(),
            out,
        }))
    }

    /// Per-segment maximum over a rank-1 array. Gradient flows to the first
    /// attaining element of each segment.
    pub fn segment_max(&mut self, x: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let n = self.nodes[x.0].numel();
        if self.nodes[x.0].shape().len() != 1 {
            return Err(NdError::Invalid(format!(
                "segment_max needs a rank-1 array, got shape {:?}",
                self.nodes[x.0].shape()
            )));
        }
        let xv = self.nodes[x.0].values();
        let mut out = Vec::with_capacity(segments.len());
        let mut argmax = Vec::with_capacity(segments.len());
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(NdError::Invalid(format!("segment {s} is empty")));
            }
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0usize;
            for &idx in seg {
                if idx >= n {
                    return Err(NdError::Invalid(format!(
                        "segment {s} references element {idx}, array has {n}"
                    )));
                }
                if xv[idx] > best {
                    best = xv[idx];
                    best_idx = idx;
                }
            }
            out.push(best);
            argmax.push(best_idx);
        }
        let len = segments.len();
        let arr = DiffArray::new(out, vec![len])?;
        Ok(self.push(arr, |out| Step::SegmentMax {
            x: x.0,
            argmax: argmax.into_boxed_slice(),
            out,
        }))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar node. Clears any previous gradients, seeds
    /// the loss gradient with 1, and replays all steps in reverse. Every leaf
    /// with `requires_grad` ends up with a populated gradient buffer (zeros if
    /// the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(NdError::Invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let steps = std::mem::take(&mut self.steps);
        for step in steps.iter().rev() {
            backward_step(&self.nodes, &self.needs, &mut self.grads, step);
        }
        self.steps = steps;
        for (node, grad) in self.nodes.iter_mut().zip(self.grads.iter()) {
            if node.requires_grad() {
                let g = grad
                    .clone()
                    .unwrap_or_else(|| vec![0.0; node.numel()]);
                node.set_grad(g);
            }
        }
        Ok(())
    }
}

fn gelu(x: f64) -> f64 {
    const C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const C1: f64 = 0.044715;
    0.5 * x * (1.0 + (C0 * (x + C1 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C0: f64 = 0.797_884_560_802_865_4;
    const C1: f64 = 0.044715;
    let u = C0 * (x + C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C0 * (1.0 + 3.0 * C1 * x * x)
}

fn add_grad(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn step_inputs(step: &Step) -> Vec<usize> {
    match *step {
        Step::Matmul { a, b, .. }
        | Step::Hadamard { a, b, .. }
        | Step::Add { a, b, .. } => vec![a, b],
        Step::AddRow { x, row, .. } => vec![x, row],
        Step::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
        Step::Transpose { x, .. }
        | Step::SoftmaxRows { x, .. }
        | Step::LogSoftmaxRows { x, .. }
        | Step::Pointwise { x, .. }
        | Step::Reduce { x, .. }
        | Step::Reshape { x, .. }
        | Step::Reindex { x, .. }
        | Step::SegmentMax { x, .. } => vec![x],
    }
}

fn backward_step(nodes: &[DiffArray], needs: &[bool], grads: &mut [Option<Vec<f64>>], step: &Step) {
    match *step {
        Step::Matmul { a, b, out } => {
            let Some(g) = grads[out].take() else { return };
            let (m, k) = nodes[a].dims2().unwrap();
            let (_, n) = nodes[b].dims2().unwrap();
            let av = nodes[a].values();
            let bv = nodes[b].values();
            if needs[a] {
                // da = g . b^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for t in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv[t * n + j];
                        }
                        da[i * k + t] = s;
                    }
                }
                add_grad(&mut grads[a], da);
            }
            if needs[b] {
                // db = a^T . g, accumulated row-wise so the inner loop is
                // contiguous in both g and db
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for t in 0..k {
                        let ait = av[i * k + t];
                        if ait == 0.0 {
                            continue;
                        }
                        let drow = &mut db[t * n..(t + 1) * n];
                        for j in 0..n {
                            drow[j] += ait * grow[j];
                        }
                    }
                }
                add_grad(&mut grads[b], db);
            }
        }
        Step::Transpose { x, out } => {
            let Some(g) = grads[out].take() else { return };
            if !needs[x] {
                return;
            }
            let (r, c) = nodes[x].dims2().unwrap();
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g[j * r + i];
                }
            }
            add_grad(&mut grads[x], dx);
        }
        Step::SoftmaxRows { x, out } => {
            let Some(g) = grads[out].take() else { return };
            if !needs[x] {
                return;
            }
            let (r, c) = nodes[out].dims2().unwrap();
            let s = nodes[out].values();
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let base = i * c;
                let dot: f64 = (0..c).map(|j| g[base + j] * s[base + j]).sum();
                for j in 0..c {
                    dx[base + j] = s[base + j] * (g[base + j] - dot);
                }
            }
            add_grad(&mut grads[x], dx);
        }
        Step::LogSoftmaxRows { x, out } => {
            let Some(g) = grads[out].take() else { return };
            if !needs[x] {
                return;
            }
            let (r, c) = nodes[out].dims2().unwrap();
            let y = nodes[out].values();
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let base = i * c;
                let gsum: f64 = g[base..base + c].iter().sum();
                for j in 0..c {
                    dx[base + j] = g[base + j] - y[base + j].exp() * gsum;
                }
            }
            add_grad(&mut grads[x], dx);
        }
        Step::LayerNorm { x, gain, bias, eps, out } => {
            let Some(g) = grads[out].take() else { return };
            let (n, d) = nodes[x].dims2().unwrap();
            let xv = nodes[x].values();
            let gv = nodes[gain].values();
            let mut dx = vec![0.0; if needs[x] { n * d } else { 0 }];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for i in 0..n {
                let row = &xv[i * d..(i + 1) * d];
                let grow = &g[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for j in 0..d {
                    dgain[j] += grow[j] * xhat[j];
                    dbias[j] += grow[j];
                    let dxh = grow[j] * gv[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xhat[j];
                }
                if needs[x] {
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let dxh = grow[j] * gv[j];
                        dx[i * d + j] = inv * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
            }
            if needs[x] {
                add_grad(&mut grads[x], dx);
            }
            if needs[gain] {
                add_grad(&mut grads[gain], dgain);
            }
            if needs[bias] {
                add_grad(&mut grads[bias], dbias);
            }
        }
        Step::Hadamard { a, b, out } => {
            let Some(g) = grads[out].take() else { return };
            let av = nodes[a].values();
            let bv = nodes[b].values();
            if needs[a] {
                let da: Vec<f64> = g.iter().zip(bv).map(|(gi, bi)| gi * bi).collect();
                add_grad(&mut grads[a], da);
            }
            if needs[b] {
                let db: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                add_grad(&mut grads[b], db);
            }
        }
        Step::Add { a, b, out } => {
            let Some(g) = grads[out].take() else { return };
            match (needs[a], needs[b]) {
                (true, true) => {
                    add_grad(&mut grads[a], g.clone());
                    add_grad(&mut grads[b], g);
                }
                (true, false) => add_grad(&mut grads[a], g),
                (false, true) => add_grad(&mut grads[b], g),
                (false, false) => {}
            }
        }
        Step::AddRow { x, row, out } => {
            let Some(g) = grads[out].take() else { return };
            let (n, d) = nodes[x].dims2().unwrap();
            if needs[row] {
                let mut drow = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        drow[j] += g[i * d + j];
                    }
                }
                add_grad(&mut grads[row], drow);
            }
            if needs[x] {
                add_grad(&mut grads[x], g);
            }
        }
        Step::Pointwise { x, kind, out } => {
            let Some(g) = grads[out].take() else { return };
            if !needs[x] {
                return;
            }
            let xv = nodes[x].values();
            let yv = nodes[out].values();
            let dx: Vec<f64> = match kind {
                Pointwise::Sigmoid => g
                    .iter()
                    .zip(yv)
                    .map(|(gi, yi)| gi * yi * (1.0 - yi))
                    .collect(),
                Pointwise::Log => g.iter().zip(xv).map(|(gi, xi)| gi / xi).collect(),
                Pointwise::Exp => g.iter().zip(yv).map(|(gi, yi)| gi * yi).collect(),
                Pointwise::Negate => g.iter().map(|gi| -gi).collect(),
                Pointwise::Scale(c) => g.iter().map(|gi| c * gi).collect(),
                Pointwise::Gelu => g
                    .iter()
                    .zip(xv)
                    .map(|(gi, xi)| gi * gelu_grad(*xi))
                    .collect(),
                Pointwise::Clamp { lo, hi } => g
                    .iter()
                    .zip(xv)
                    .map(|(gi, xi)| if *xi >= lo && *xi <= hi { *gi } else { 0.0 })
                    .collect(),
            };
            add_grad(&mut grads[x], dx);
        }
        Step::Reduce { x, kind, axis, out } => {
            let Some(g) = grads[out].take() else { return };
            if !needs[x] {
                return;
            }
            let shape = nodes[x].shape();
            let numel = nodes[x].numel();
            let dx: Vec<f64> = match (axis, shape) {
                (None, _) | (Some(_), &[_]) => {
                    let scale = match kind {
                        Reduce::Sum => 1.0,
                        Reduce::Mean => 1.0 / numel as f64,
                    };
                    vec![g[0] * scale; numel]
                }
                (Some(ax), &[n, d]) => {
                    let mut dx = vec![0.0; n * d];
                    if ax == 0 {
                        let scale = match kind {
                            Reduce::Sum => 1.0,
                            Reduce::Mean => 1.0 / n as f64,
                        };
                        for i in 0..n {
                            for j in 0..d {
                                dx[i * d + j] = g[j] * scale;
                            }
                        }
                    } else {
                        let scale = match kind {
                            Reduce::Sum => 1.0,
                            Reduce::Mean => 1.0 / d as f64,
                        };
                        for i in 0..n {
                            for j in 0..d {
                                dx[i * d + j] = g[i] * scale;
                            }
                        }
                    }
                    dx
                }
                _ => unreachable!("validated at forward"),
            };
            add_grad(&mut grads[x], dx);
        }
        Step::Reshape { x, out } => {
            let Some(g) = grads[out].take() else { return };
            if needs[x] {
                add_grad(&mut grads[x], g);
            }
        }
        Step::Reindex { x, ref map, out } => {
            let Some(g) = grads[out].take() else { return };
            if !needs[x] {
                return;
            }
            let mut dx = vec![0.0; nodes[x].numel()];
            for (j, &m) in map.iter().enumerate() {
                if m != REINDEX_ZERO {
                    dx[m] += g[j];
                }
            }
            add_grad(&mut grads[x], dx);
        }
        Step::SegmentMax { x, ref argmax, out } => {
            let Some(g) = grads[out].take() else { return };
            if !needs[x] {
                return;
            }
            let mut dx = vec![0.0; nodes[x].numel()];
            for (s, &idx) in argmax.iter().enumerate() {
                dx[idx] += g[s];
            }
            add_grad(&mut grads[x], dx);
        }
    }
}
