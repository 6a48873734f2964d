//! Eager tape for reverse-mode differentiation.
//!
//! Every op evaluates its output immediately and appends a node; node inputs
//! always refer to earlier nodes, so reverse creation order is a valid
//! topological order for the backward sweep. The op vocabulary is fixed to what
//! the models in this crate need.

use crate::error::{Error, Result};
use crate::neurons::{self, NeuronConfig};

use super::ops::{self, Activation};
use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Act(Activation, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    RmsNorm {
        x: NodeId,
        w: NodeId,
        inv_rms: Vec<T>,
    },
    Conv {
        x: NodeId,
        kernel: NodeId,
        seq_len: usize,
    },
    Neuron {
        x: NodeId,
        cfg: NeuronConfig,
    },
    Slice {
        x: NodeId,
        start: usize,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Pick {
        x: NodeId,
        idx: Vec<usize>,
    },
    SegmentSum {
        x: NodeId,
        seg: Vec<Option<usize>>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Replace {
        x: NodeId,
        keep: Vec<bool>,
    },
    Scan(Box<ScanSaved<T>>),
}

#[derive(Debug, Clone)]
struct ScanSaved<T> {
    x: NodeId,
    dt: NodeId,
    a: NodeId,
    b: NodeId,
    c: NodeId,
    seq_len: usize,
    heads: usize,
    /// `h_t` after each step, `[rows × heads × n × p]`.
    states: Vec<T>,
    /// Per-step decay `[rows × heads]`.
    alphas: Vec<T>,
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<NodeId>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, zero-filled if the loss does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Tensor<T> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

fn split_rows(rows: usize, seq_len: usize) -> Result<usize> {
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::dim(format!(
            "{rows} rows are not a whole number of length-{seq_len} sequences"
        )));
    }
    Ok(rows / seq_len)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite() || !requires_grad, "non-finite value recorded");
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Leaf, value, true);
        self.params.push(id);
        id
    }

    /// Differentiable leaf that is not a parameter (used for input-gradient audits).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMulNt(a, b), v, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    fn row_broadcast(&self, a: NodeId, row: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if rv.numel() != c {
            return Err(Error::dim(format!(
                "row operand has {} entries, last axis is {c}",
                rv.numel()
            )));
        }
        let r = rv.data();
        let data = av
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// `a[.., c] + row[c]` broadcast over leading axes.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.row_broadcast(a, row, |x, y| x + y)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(Op::AddRow(a, row), v, rg))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.row_broadcast(a, row, |x, y| x * y)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(Op::MulRow(a, row), v, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, c), v, rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(Op::AddScalar(a), v, rg)
    }

    pub fn act(&mut self, kind: Activation, a: NodeId) -> NodeId {
        let v = ops::activation(kind, self.value(a));
        let rg = self.rg(&[a]);
        self.push(Op::Act(kind, a), v, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let v = ops::softmax(x, x.rank() - 1)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Softmax(a), v, rg))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let v = ops::log_softmax(x, x.rank() - 1)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::LogSoftmax(a), v, rg))
    }

    pub fn rmsnorm(&mut self, x: NodeId, w: NodeId, eps: T) -> Result<NodeId> {
        let v = ops::rmsnorm(self.value(x), self.value(w), eps)?;
        let inv_rms = ops::inv_rms_rows(self.value(x), eps);
        let rg = self.rg(&[x, w]);
        Ok(self.push(Op::RmsNorm { x, w, inv_rms }, v, rg))
    }

    /// Depthwise causal conv over `[rows × c]`, treating every `seq_len` rows as an
    /// independent sequence starting from a zero state.
    pub fn causal_conv(&mut self, x: NodeId, kernel: NodeId, seq_len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let (rows, c) = (xv.rows(), xv.cols());
        let n_seq = split_rows(rows, seq_len)?;
        if kv.rank() != 2 || kv.shape()[0] != c {
            return Err(Error::dim(format!(
                "conv kernel {:?} does not match {c} channels",
                kv.shape()
            )));
        }
        let w = kv.cols();
        let zero_state = Tensor::zeros(&[c, w - 1]);
        let mut data = Vec::with_capacity(rows * c);
        for s in 0..n_seq {
            let seg = Tensor::new(
                vec![seq_len, c],
                xv.data()[s * seq_len * c..(s + 1) * seq_len * c].to_vec(),
            )?;
            let (y, _) = ops::causal_conv1d(&seg, kv, &zero_state)?;
            data.extend_from_slice(y.data());
        }
        let v = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(Op::Conv { x, kernel, seq_len }, v, rg))
    }

    pub fn neuron(&mut self, x: NodeId, cfg: NeuronConfig) -> NodeId {
        let v = neurons::neuron_forward(&cfg, self.value(x));
        let rg = self.rg(&[x]);
        self.push(Op::Neuron { x, cfg }, v, rg)
    }

    /// Columns `start..start+len` of a rank-2 node.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        if xv.rank() != 2 || start + len > c || len == 0 {
            return Err(Error::dim(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let v = Tensor::new(vec![xv.rows(), len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Slice { x, start }, v, rg))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (v_rows, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v_rows {
                return Err(Error::input(format!("index {i} out of range for {v_rows} rows")));
            }
            data.extend_from_slice(tv.row(i));
        }
        let v = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            v,
            rg,
        ))
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.rows() != idx.len() {
            return Err(Error::dim("pick needs one index per row"));
        }
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len());
        for (r, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::input(format!("pick index {j} out of range for {c} columns")));
            }
            data.push(xv.row(r)[j]);
        }
        let v = Tensor::new(vec![idx.len()], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            v,
            rg,
        ))
    }

    /// Sums entries of a flat node into `n` buckets; `None` entries are dropped.
    pub fn segment_sum(&mut self, x: NodeId, seg: &[Option<usize>], n: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.numel() != seg.len() {
            return Err(Error::dim("segment map must cover every entry"));
        }
        let mut out = vec![T::zero(); n];
        for (&v, s) in xv.data().iter().zip(seg) {
            if let Some(s) = *s {
                if s >= n {
                    return Err(Error::input(format!("segment {s} out of range for {n}")));
                }
                out[s] += v;
            }
        }
        let v = Tensor::new(vec![n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::SegmentSum {
                x,
                seg: seg.to_vec(),
            },
            v,
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), v, rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / T::from_usize(xv.numel()).unwrap());
        let rg = self.rg(&[x]);
        self.push(Op::Mean(x), v, rg)
    }

    /// Substitutes `replacement` wherever `keep` is false; those entries carry no gradient.
    pub fn replace(&mut self, x: NodeId, replacement: Tensor<T>, keep: Vec<bool>) -> Result<NodeId> {
        let xv = self.value(x);
        xv.expect_same_shape(&replacement)?;
        if keep.len() != xv.numel() {
            return Err(Error::dim("keep mask must cover every entry"));
        }
        let data = xv
            .data()
            .iter()
            .zip(replacement.data())
            .zip(&keep)
            .map(|((&a, &b), &k)| if k { a } else { b })
            .collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Replace { x, keep }, v, rg))
    }

    /// Selective state-space scan, per head `h`:
    /// `h_t = exp(-dt·exp(a)) h_{t-1} + dt · b_t ⊗ x_t`, output `c_t · h_t`.
    ///
    /// Shapes: `x [R×H·P]`, `dt [R×H]`, `a [H]`, `b, c [R×N]`, output `[R×H·P]`.
    /// Each block of `seq_len` rows starts from a zero state.
    #[allow(clippy::too_many_arguments)]
    pub fn ssm_scan(
        &mut self,
        x: NodeId,
        dt: NodeId,
        a: NodeId,
        b: NodeId,
        c: NodeId,
        heads: usize,
        seq_len: usize,
    ) -> Result<NodeId> {
        let (xv, dtv, av, bv, cv) = (
            self.value(x),
            self.value(dt),
            self.value(a),
            self.value(b),
            self.value(c),
        );
        let rows = xv.rows();
        let n_seq = split_rows(rows, seq_len)?;
        let hp = xv.cols();
        let n = bv.cols();
        if heads == 0 || hp % heads != 0 {
            return Err(Error::dim(format!("{hp} channels do not split into {heads} heads")));
        }
        let p = hp / heads;
        if dtv.rows() != rows
            || dtv.cols() != heads
            || av.numel() != heads
            || bv.rows() != rows
            || cv.rows() != rows
            || cv.cols() != n
        {
            return Err(Error::dim("scan operand shapes disagree"));
        }
        let hs = n * p;
        let mut states = vec![T::zero(); rows * heads * hs];
        let mut alphas = vec![T::zero(); rows * heads];
        let mut out = vec![T::zero(); rows * hp];
        let (xd, dtd, bd, cd) = (xv.data(), dtv.data(), bv.data(), cv.data());
        let rates: Vec<T> = av.data().iter().map(|&v| v.exp()).collect();
        for s in 0..n_seq {
            for t in s * seq_len..(s + 1) * seq_len {
                let first = t == s * seq_len;
                for h in 0..heads {
                    let d = dtd[t * heads + h];
                    let alpha = (-d * rates[h]).exp();
                    alphas[t * heads + h] = alpha;
                    let cur = (t * heads + h) * hs;
                    let prev = ((t.max(1) - 1) * heads + h) * hs;
                    let xs = &xd[t * hp + h * p..t * hp + (h + 1) * p];
                    for ni in 0..n {
                        let db = d * bd[t * n + ni];
                        for pi in 0..p {
                            let carried = if first {
                                T::zero()
                            } else {
                                alpha * states[prev + ni * p + pi]
                            };
                            states[cur + ni * p + pi] = carried + db * xs[pi];
                        }
                    }
                    let o = &mut out[t * hp + h * p..t * hp + (h + 1) * p];
                    for ni in 0..n {
                        let cn = cd[t * n + ni];
                        for (pi, ov) in o.iter_mut().enumerate() {
                            *ov += cn * states[cur + ni * p + pi];
                        }
                    }
                }
            }
        }
        let v = Tensor::new(vec![rows, hp], out)?;
        let rg = self.rg(&[x, dt, a, b, c]);
        Ok(self.push(
            Op::Scan(Box::new(ScanSaved {
                x,
                dt,
                a,
                b,
                c,
                seq_len,
                heads,
                states,
                alphas,
            })),
            v,
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |id: NodeId, t: Tensor<T>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if rg(a) {
                    acc(a, ops::matmul_nt(g, self.value(b))?);
                }
                if rg(b) {
                    acc(b, ops::matmul_tn(self.value(a), g)?);
                }
            }
            &Op::MatMulNt(a, b) => {
                if rg(a) {
                    acc(a, ops::matmul(g, self.value(b))?);
                }
                if rg(b) {
                    acc(b, ops::matmul_tn(g, self.value(a))?);
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.scale(-T::one()));
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    acc(a, g.zip_map(self.value(b), |x, y| x * y)?);
                }
                if rg(b) {
                    acc(b, g.zip_map(self.value(a), |x, y| x * y)?);
                }
            }
            &Op::AddRow(a, row) => {
                acc(a, g.clone());
                if rg(row) {
                    let c = g.cols();
                    let mut r = vec![T::zero(); c];
                    for chunk in g.data().chunks(c) {
                        for (s, &v) in r.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    acc(row, Tensor::new(self.value(row).shape().to_vec(), r)?);
                }
            }
            &Op::MulRow(a, row) => {
                let rv = self.value(row).data();
                let c = g.cols();
                if rg(a) {
                    let data = g
                        .data()
                        .chunks(c)
                        .flat_map(|chunk| chunk.iter().zip(rv).map(|(&x, &y)| x * y))
                        .collect();
                    acc(a, Tensor::new(g.shape().to_vec(), data)?);
                }
                if rg(row) {
                    let mut r = vec![T::zero(); c];
                    for (gc, ac) in g.data().chunks(c).zip(self.value(a).data().chunks(c)) {
                        for ((s, &gv), &av) in r.iter_mut().zip(gc).zip(ac) {
                            *s += gv * av;
                        }
                    }
                    acc(row, Tensor::new(self.value(row).shape().to_vec(), r)?);
                }
            }
            &Op::Scale(a, c) => acc(a, g.scale(c)),
            &Op::AddScalar(a) => acc(a, g.clone()),
            &Op::Act(kind, a) => {
                let x = self.value(a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(node.value.data())
                    .map(|((&gv, &xv), &yv)| gv * kind.derivative(xv, yv))
                    .collect();
                acc(a, Tensor::new(x.shape().to_vec(), data)?);
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut data = Vec::with_capacity(y.numel());
                for (gc, yc) in g.data().chunks(c).zip(y.data().chunks(c)) {
                    let dot: T = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum();
                    data.extend(gc.iter().zip(yc).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                acc(a, Tensor::new(y.shape().to_vec(), data)?);
            }
            &Op::LogSoftmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut data = Vec::with_capacity(y.numel());
                for (gc, yc) in g.data().chunks(c).zip(y.data().chunks(c)) {
                    let total: T = gc.iter().copied().sum();
                    data.extend(gc.iter().zip(yc).map(|(&gv, &yv)| gv - yv.exp() * total));
                }
                acc(a, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (x, w) = (*x, *w);
                let xv = self.value(x);
                let wv = self.value(w).data();
                let d = xv.cols();
                let dt = T::from_usize(d).unwrap();
                if rg(x) {
                    let mut data = Vec::with_capacity(xv.numel());
                    for (r, &s) in inv_rms.iter().enumerate() {
                        let (gr, xr) = (g.row(r), xv.row(r));
                        let dot: T = (0..d).map(|j| gr[j] * wv[j] * xr[j]).sum();
                        let k = s * s * s * dot / dt;
                        data.extend((0..d).map(|j| s * gr[j] * wv[j] - k * xr[j]));
                    }
                    acc(x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                if rg(w) {
                    let mut gw = vec![T::zero(); d];
                    for (r, &s) in inv_rms.iter().enumerate() {
                        for ((acc_w, &gv), &xv_) in gw.iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                            *acc_w += gv * xv_ * s;
                        }
                    }
                    acc(w, Tensor::new(self.value(w).shape().to_vec(), gw)?);
                }
            }
            &Op::Conv { x, kernel, seq_len } => {
                let xv = self.value(x);
                let kv = self.value(kernel);
                let (rows, c, w) = (xv.rows(), xv.cols(), kv.cols());
                let mut gx = vec![T::zero(); rows * c];
                let mut gk = vec![T::zero(); c * w];
                let (xd, gd, kd) = (xv.data(), g.data(), kv.data());
                for t in 0..rows {
                    let start = t - t % seq_len;
                    for ch in 0..c {
                        let gy = gd[t * c + ch];
                        if gy == T::zero() {
                            continue;
                        }
                        for j in 0..w {
                            // tap j reads row t - (w-1) + j
                            let Some(src) = (t + j).checked_sub(w - 1) else {
                                continue;
                            };
                            if src < start {
                                continue;
                            }
                            gx[src * c + ch] += kd[ch * w + j] * gy;
                            gk[ch * w + j] += xd[src * c + ch] * gy;
                        }
                    }
                }
                if rg(x) {
                    acc(x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                if rg(kernel) {
                    acc(kernel, Tensor::new(kv.shape().to_vec(), gk)?);
                }
            }
            Op::Neuron { x, cfg } => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| gv * neurons::surrogate_grad(cfg, v))
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            &Op::Slice { x, start } => {
                let xv = self.value(x);
                let (c, len) = (xv.cols(), g.cols());
                let mut data = vec![T::zero(); xv.numel()];
                for (r, gr) in g.data().chunks(len).enumerate() {
                    data[r * c + start..r * c + start + len].copy_from_slice(gr);
                }
                acc(x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut data = vec![T::zero(); tv.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for (dst, &v) in data[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                        *dst += v;
                    }
                }
                acc(*table, Tensor::new(tv.shape().to_vec(), data)?);
            }
            Op::Pick { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut data = vec![T::zero(); xv.numel()];
                for (r, (&j, &gv)) in idx.iter().zip(g.data()).enumerate() {
                    data[r * c + j] = gv;
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::SegmentSum { x, seg } => {
                let gd = g.data();
                let data = seg
                    .iter()
                    .map(|s| s.map_or(T::zero(), |s| gd[s]))
                    .collect();
                acc(*x, Tensor::new(self.value(*x).shape().to_vec(), data)?);
            }
            &Op::Sum(x) => acc(x, Tensor::full(self.value(x).shape(), g.item())),
            &Op::Mean(x) => {
                let xv = self.value(x);
                let v = g.item() / T::from_usize(xv.numel()).unwrap();
                acc(x, Tensor::full(xv.shape(), v));
            }
            Op::Replace { x, keep } => {
                let data = g
                    .data()
                    .iter()
                    .zip(keep)
                    .map(|(&v, &k)| if k { v } else { T::zero() })
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Scan(saved) => {
                let grads_out = self.scan_backward(saved, g)?;
                let ScanSaved { x, dt, a, b, c, .. } = **saved;
                let [gx, gdt, ga, gb, gc] = grads_out;
                acc(x, gx);
                acc(dt, gdt);
                acc(a, ga);
                acc(b, gb);
                acc(c, gc);
            }
        }
        Ok(())
    }

    fn scan_backward(&self, s: &ScanSaved<T>, g: &Tensor<T>) -> Result<[Tensor<T>; 5]> {
        let (xv, dtv, av, bv, cv) = (
            self.value(s.x),
            self.value(s.dt),
            self.value(s.a),
            self.value(s.b),
            self.value(s.c),
        );
        let rows = xv.rows();
        let hp = xv.cols();
        let heads = s.heads;
        let p = hp / heads;
        let n = bv.cols();
        let hs = n * p;
        let (xd, dtd, bd, cd, gd) = (xv.data(), dtv.data(), bv.data(), cv.data(), g.data());
        let rates: Vec<T> = av.data().iter().map(|&v| v.exp()).collect();
        let mut gx = vec![T::zero(); rows * hp];
        let mut gdt = vec![T::zero(); rows * heads];
        let mut ga = vec![T::zero(); heads];
        let mut gb = vec![T::zero(); rows * n];
        let mut gc = vec![T::zero(); rows * n];
        let mut gh = vec![T::zero(); hs];
        for seq_start in (0..rows).step_by(s.seq_len) {
            for h in 0..heads {
                gh.iter_mut().for_each(|v| *v = T::zero());
                for t in (seq_start..seq_start + s.seq_len).rev() {
                    let cur = (t * heads + h) * hs;
                    let gy = &gd[t * hp + h * p..t * hp + (h + 1) * p];
                    let xs = &xd[t * hp + h * p..t * hp + (h + 1) * p];
                    for ni in 0..n {
                        let cn = cd[t * n + ni];
                        let mut gcn = T::zero();
                        for pi in 0..p {
                            gh[ni * p + pi] += cn * gy[pi];
                            gcn += gy[pi] * s.states[cur + ni * p + pi];
                        }
                        gc[t * n + ni] += gcn;
                    }
                    let d = dtd[t * heads + h];
                    let alpha = s.alphas[t * heads + h];
                    let mut g_alpha = T::zero();
                    if t > seq_start {
                        let prev = ((t - 1) * heads + h) * hs;
                        for k in 0..hs {
                            g_alpha += gh[k] * s.states[prev + k];
                        }
                    }
                    let mut g_dt = T::zero();
                    for ni in 0..n {
                        let bn = bd[t * n + ni];
                        let mut gbn = T::zero();
                        for pi in 0..p {
                            let ghv = gh[ni * p + pi];
                            gbn += ghv * xs[pi];
                            gx[t * hp + h * p + pi] += d * ghv * bn;
                        }
                        g_dt += gbn * bn;
                        gb[t * n + ni] += d * gbn;
                    }
                    let dalpha = -rates[h] * alpha;
                    gdt[t * heads + h] = g_dt + g_alpha * dalpha;
                    ga[h] += g_alpha * dalpha * d;
                    for v in gh.iter_mut() {
                        *v *= alpha;
                    }
                }
            }
        }
        Ok([
            Tensor::new(xv.shape().to_vec(), gx)?,
            Tensor::new(dtv.shape().to_vec(), gdt)?,
            Tensor::new(av.shape().to_vec(), ga)?,
            Tensor::new(bv.shape().to_vec(), gb)?,
            Tensor::new(cv.shape().to_vec(), gc)?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_sum_gradient_at_zero_is_one() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[3, 2]));
        let y = g.act(Activation::Tanh, x);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::from_rows(&[&[0.3, -1.2, 2.0]]).unwrap());
        let lp = g.log_softmax(logits).unwrap();
        let pick = g.pick(lp, &[1]).unwrap();
        let nll = g.scale(pick, -1.0);
        let l = g.sum(nll);
        let grads = g.backward(l).unwrap();
        let p = ops::softmax(g.value(logits), 1).unwrap();
        let got = grads.wrt(logits);
        for j in 0..3 {
            let want = p.data()[j] - if j == 1 { 1.0 } else { 0.0 };
            assert!((got.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_slice(&[1.0, 2.0]));
        let unused = g.param(Tensor::from_slice(&[5.0]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_slice(&[1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn nodes_reference_earlier_nodes_only() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_slice(&[1.0]));
        let b = g.constant(Tensor::from_slice(&[2.0]));
        let c = g.mul(a, b).unwrap();
        assert!(a < c && b < c);
        assert_eq!(g.len(), 3);
    }
}
