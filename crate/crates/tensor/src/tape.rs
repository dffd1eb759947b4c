//! Reverse-mode gradient recording.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its value and enough of its inputs to run the adjoint;
//! [`Tape::backward`] walks the nodes from the loss down to index zero.

use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::params::ParamStore;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const ELU_ALPHA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Elu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_RELU_SLOPE * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    ELU_ALPHA * x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative in terms of the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + ELU_ALPHA
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRow(usize, usize),
    Act(usize, Activation),
    Relu(usize),
    SoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    GatherRows(usize, Rc<[usize]>),
    SegmentSum(usize, Rc<[usize]>),
    SegmentSoftmax(usize, Rc<[usize]>),
    ScaleRows(usize, usize),
    ConcatCols(Vec<usize>),
    CosineRows(usize, usize),
    LogSumExpMasked(usize, Rc<[bool]>),
    GateMix(usize, usize, usize),
    BlockAttention {
        q: usize,
        k: usize,
        v: usize,
        block: usize,
        scale: f64,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: BTreeMap<String, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::Usage(
                "variable was not recorded on this tape".into(),
            ));
        }
        Ok(v.idx)
    }

    fn val(&self, v: usize) -> &Tensor {
        &self.nodes[v].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Registers (once) a named parameter from `store` as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&idx) = self.params.get(name) {
            return Ok(Var { tape: self.id, idx });
        }
        let value = store
            .value(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_string(), v.idx);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (self.val(ia), self.val(ib));
        if !x.is_matrix() || !y.is_matrix() || x.cols() != y.rows() {
            return Err(dim_err("matmul", x, y));
        }
        let out = kernels::matmul(x, y)?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        if !x.is_matrix() {
            return Err(TensorError::Usage("transpose needs a matrix".into()));
        }
        let out = kernels::transpose(x);
        Ok(self.push(out, Op::Transpose(ia)))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (self.val(ia), self.val(ib));
        if x.shape() != y.shape() {
            return Err(dim_err(op, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Ok((ia, ib, Tensor::from_parts(x.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_same(a, b, "add", |p, q| p + q)?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_same(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_same(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())?;
        Ok(self.push(out, Op::Scale(ia, c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect())?;
        Ok(self.push(out, Op::AddScalar(ia)))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (x, b) = (self.val(ia), self.val(ib));
        if b.len() != x.cols() || (b.is_matrix() && b.rows() != 1) {
            return Err(dim_err("add_row", x, b));
        }
        let n = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % n])
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(ia, ib)))
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| kind.apply(*v)).collect())?;
        Ok(self.push(out, Op::Act(ia, kind)))
    }

    /// `max(0, x)` elementwise; used for hinge losses.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())?;
        Ok(self.push(out, Op::Relu(ia)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let out = kernels::softmax_rows(x)?;
        Ok(self.push(out, Op::SoftmaxRows(ia)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.val(ia).data().iter().sum();
        Ok(self.push(Tensor::scalar(s)?, Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        Ok(self.push(Tensor::scalar(s)?, Op::Mean(ia)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(ia)))
    }

    /// Selects rows (with repetition) of a matrix.
    pub fn gather_rows(&mut self, a: Var, rows: Rc<[usize]>) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        if !x.is_matrix() {
            return Err(TensorError::Usage("gather_rows needs a matrix".into()));
        }
        if rows.is_empty() {
            return Err(TensorError::Usage("gather_rows with no rows".into()));
        }
        let n = x.cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows.iter() {
            if r >= x.rows() {
                return Err(TensorError::Usage(format!(
                    "gather_rows index {r} out of range for {} rows",
                    x.rows()
                )));
            }
            data.extend_from_slice(x.row(r));
        }
        let out = Tensor::from_parts(vec![rows.len(), n], data)?;
        Ok(self.push(out, Op::GatherRows(ia, rows)))
    }

    /// Sums consecutive row ranges `offsets[s]..offsets[s+1]`; empty ranges give zero rows.
    pub fn segment_sum(&mut self, a: Var, offsets: Rc<[usize]>) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let rows = if x.is_matrix() { x.rows() } else { x.len() };
        check_offsets(&offsets, rows)?;
        let n = if x.is_matrix() { x.cols() } else { 1 };
        let segs = offsets.len() - 1;
        let mut data = vec![0.0; segs * n];
        for s in 0..segs {
            for r in offsets[s]..offsets[s + 1] {
                for c in 0..n {
                    data[s * n + c] += x.data()[r * n + c];
                }
            }
        }
        let shape = if x.is_matrix() { vec![segs, n] } else { vec![segs] };
        let out = Tensor::from_parts(shape, data)?;
        Ok(self.push(out, Op::SegmentSum(ia, offsets)))
    }

    /// Softmax within each segment of a flat score vector.
    pub fn segment_softmax(&mut self, a: Var, offsets: Rc<[usize]>) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        check_offsets(&offsets, x.len())?;
        let mut data = vec![0.0; x.len()];
        for w in offsets.windows(2) {
            kernels::softmax_into(&x.data()[w[0]..w[1]], &mut data[w[0]..w[1]]);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::SegmentSoftmax(ia, offsets)))
    }

    /// Multiplies row `r` of `a` by entry `r` of `weights`.
    pub fn scale_rows(&mut self, a: Var, weights: Var) -> Result<Var> {
        let (ia, iw) = (self.idx(a)?, self.idx(weights)?);
        let (x, w) = (self.val(ia), self.val(iw));
        if !x.is_matrix() || w.len() != x.rows() {
            return Err(dim_err("scale_rows", x, w));
        }
        let n = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * w.data()[i / n])
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ScaleRows(ia, iw)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Usage("concat_cols of nothing".into()));
        }
        let idxs = parts.iter().map(|p| self.idx(*p)).collect::<Result<Vec<_>>>()?;
        let first = self.val(idxs[0]);
        let m = first.rows();
        for &i in &idxs {
            let t = self.val(i);
            if !t.is_matrix() || t.rows() != m {
                return Err(dim_err("concat_cols", first, t));
            }
        }
        let total: usize = idxs.iter().map(|&i| self.val(i).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &i in &idxs {
                data.extend_from_slice(self.val(i).row(r));
            }
        }
        let out = Tensor::from_parts(vec![m, total], data)?;
        Ok(self.push(out, Op::ConcatCols(idxs)))
    }

    /// Row-wise cosine similarity of two equally shaped matrices, as a vector.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (self.val(ia), self.val(ib));
        if x.shape() != y.shape() {
            return Err(dim_err("cosine_rows", x, y));
        }
        let mut data = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let (u, v) = (x.row(r), y.row(r));
            let (nu, nv) = (crate::tensor::norm(u), crate::tensor::norm(v));
            if nu == 0.0 || nv == 0.0 {
                return Err(TensorError::Degenerate {
                    op: "cosine_rows",
                    reason: format!("zero-norm vector in row {r}"),
                });
            }
            data.push(crate::tensor::dot(u, v) / (nu * nv));
        }
        let out = Tensor::from_parts(vec![x.rows()], data)?;
        Ok(self.push(out, Op::CosineRows(ia, ib)))
    }

    /// Scalar cosine similarity of two equal-length vectors.
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        let (iu, iv) = (self.idx(u)?, self.idx(v)?);
        let (x, y) = (self.val(iu), self.val(iv));
        if x.len() != y.len() {
            return Err(dim_err("cosine_sim", x, y));
        }
        let n = x.len();
        let u = self.reshape(u, vec![1, n])?;
        let v = self.reshape(v, vec![1, n])?;
        self.cosine_rows(u, v)
    }

    /// Per-row log-sum-exp over the entries whose mask is `true`.
    pub fn logsumexp_rows_masked(&mut self, a: Var, mask: Rc<[bool]>) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        if mask.len() != x.len() {
            return Err(TensorError::Dimension {
                op: "logsumexp_rows_masked",
                left: x.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let n = x.cols();
        let mut data = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let m = &mask[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, keep)| **keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Usage(format!("row {r} has no unmasked entries")));
            }
            let s: f64 = row
                .iter()
                .zip(m)
                .filter(|(_, keep)| **keep)
                .map(|(v, _)| (v - max).exp())
                .sum();
            data.push(max + s.ln());
        }
        let out = Tensor::from_parts(vec![x.rows()], data)?;
        Ok(self.push(out, Op::LogSumExpMasked(ia, mask)))
    }

    /// `g ⊙ p + (1 − g) ⊙ q`, clamped to the interval spanned by `p` and `q`.
    pub fn gate_mix(&mut self, g: Var, p: Var, q: Var) -> Result<Var> {
        let (ig, ip, iq) = (self.idx(g)?, self.idx(p)?, self.idx(q)?);
        let (gv, pv, qv) = (self.val(ig), self.val(ip), self.val(iq));
        if gv.shape() != pv.shape() {
            return Err(dim_err("gate_mix", gv, pv));
        }
        if pv.shape() != qv.shape() {
            return Err(dim_err("gate_mix", pv, qv));
        }
        let data = gv
            .data()
            .iter()
            .zip(pv.data().iter().zip(qv.data()))
            .map(|(g, (p, q))| {
                let v = g * p + (1.0 - g) * q;
                v.clamp(p.min(*q), p.max(*q))
            })
            .collect();
        let out = Tensor::from_parts(pv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::GateMix(ig, ip, iq)))
    }

    /// Scaled dot-product attention applied independently to consecutive
    /// blocks of `block` rows: `softmax(Q_b K_bᵀ · scale) V_b` per block.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, block: usize, scale: f64) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let (qt, kt, vt) = (self.val(iq), self.val(ik), self.val(iv));
        if qt.shape() != kt.shape() {
            return Err(dim_err("block_attention", qt, kt));
        }
        if !vt.is_matrix() || vt.rows() != qt.rows() {
            return Err(dim_err("block_attention", qt, vt));
        }
        if block == 0 || qt.rows() % block != 0 {
            return Err(TensorError::Usage(format!(
                "block size {block} does not divide {} rows",
                qt.rows()
            )));
        }
        let probs = kernels::block_attention_probs(qt, kt, block, scale);
        let out = kernels::block_apply(&probs, vt, block)?;
        Ok(self.push(
            out,
            Op::BlockAttention {
                q: iq,
                k: ik,
                v: iv,
                block,
                scale,
                probs,
            },
        ))
    }

    /// Attention weights stored by a `block_attention` node, block-major.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes.get(v.idx)?.op {
            Op::BlockAttention { probs, .. } if v.tape == self.id => Some(probs),
            _ => None,
        }
    }

    /// Propagates adjoints from a scalar `loss` back to every parameter leaf.
    ///
    /// Parameters recorded on this tape but not reached by `loss` receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        adj[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            // Parameter adjoints stay in place to be collected below.
            if matches!(self.nodes[i].op, Op::Param) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.adjoint(i, &g, &mut adj);
        }
        let mut by_name = BTreeMap::new();
        for (name, &i) in &self.params {
            let shape = self.nodes[i].value.shape().to_vec();
            let data = match adj.get_mut(i).and_then(Option::take) {
                Some(d) => d,
                None => vec![0.0; self.nodes[i].value.len()],
            };
            by_name.insert(name.clone(), Tensor::new(shape, data)?);
        }
        Ok(Gradients { by_name })
    }

    fn adjoint(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let (m, k, n) = (x.rows(), x.cols(), y.cols());
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for r in 0..m {
                    for c in 0..n {
                        let gv = g[r * n + c];
                        if gv == 0.0 {
                            continue;
                        }
                        for t in 0..k {
                            da[r * k + t] += gv * y.data()[t * n + c];
                            db[t * n + c] += gv * x.data()[r * k + t];
                        }
                    }
                }
                accumulate(adj, *a, &da);
                accumulate(adj, *b, &db);
            }
            Op::Transpose(a) => {
                let (m, n) = (out.rows(), out.cols());
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[c * m + r] = g[r * n + c];
                    }
                }
                accumulate(adj, *a, &da);
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g);
                accumulate(adj, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(adj, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.val(*a).data(), self.val(*b).data());
                let da: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(x).map(|(g, x)| g * x).collect();
                accumulate(adj, *a, &da);
                accumulate(adj, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(adj, *a, &da);
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(adj, *a, g),
            Op::AddRow(a, b) => {
                accumulate(adj, *a, g);
                let n = out.cols();
                let mut db = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    db[i % n] += v;
                }
                accumulate(adj, *b, &db);
            }
            Op::Act(a, kind) => {
                let x = self.val(*a).data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x.iter().zip(out.data()))
                    .map(|(g, (x, y))| g * kind.derivative(*x, *y))
                    .collect();
                accumulate(adj, *a, &da);
            }
            Op::Relu(a) => {
                let x = self.val(*a).data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(adj, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut da = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let span = r * n..(r + 1) * n;
                    softmax_adjoint(&out.data()[span.clone()], &g[span.clone()], &mut da[span]);
                }
                accumulate(adj, *a, &da);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.val(*a).len()];
                accumulate(adj, *a, &da);
            }
            Op::Mean(a) => {
                let len = self.val(*a).len();
                let da = vec![g[0] / len as f64; len];
                accumulate(adj, *a, &da);
            }
            Op::GatherRows(a, rows) => {
                let x = self.val(*a);
                let n = x.cols();
                let mut da = vec![0.0; x.len()];
                for (o, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        da[r * n + c] += g[o * n + c];
                    }
                }
                accumulate(adj, *a, &da);
            }
            Op::SegmentSum(a, offsets) => {
                let x = self.val(*a);
                let n = if x.is_matrix() { x.cols() } else { 1 };
                let mut da = vec![0.0; x.len()];
                for s in 0..offsets.len() - 1 {
                    for r in offsets[s]..offsets[s + 1] {
                        da[r * n..(r + 1) * n].copy_from_slice(&g[s * n..(s + 1) * n]);
                    }
                }
                accumulate(adj, *a, &da);
            }
            Op::SegmentSoftmax(a, offsets) => {
                let mut da = vec![0.0; out.len()];
                for w in offsets.windows(2) {
                    let span = w[0]..w[1];
                    softmax_adjoint(&out.data()[span.clone()], &g[span.clone()], &mut da[span]);
                }
                accumulate(adj, *a, &da);
            }
            Op::ScaleRows(a, w) => {
                let (x, wt) = (self.val(*a), self.val(*w));
                let n = x.cols();
                let mut da = vec![0.0; x.len()];
                let mut dw = vec![0.0; wt.len()];
                for (i, gv) in g.iter().enumerate() {
                    let r = i / n;
                    da[i] = gv * wt.data()[r];
                    dw[r] += gv * x.data()[i];
                }
                accumulate(adj, *a, &da);
                accumulate(adj, *w, &dw);
            }
            Op::ConcatCols(parts) => {
                let m = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).cols();
                    let mut dp = vec![0.0; m * n];
                    for r in 0..m {
                        dp[r * n..(r + 1) * n]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + n]);
                    }
                    accumulate(adj, p, &dp);
                    offset += n;
                }
            }
            Op::CosineRows(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let n = x.cols();
                let mut da = vec![0.0; x.len()];
                let mut db = vec![0.0; y.len()];
                for r in 0..x.rows() {
                    let (u, v) = (x.row(r), y.row(r));
                    let (nu, nv) = (crate::tensor::norm(u), crate::tensor::norm(v));
                    let cos = out.data()[r];
                    for c in 0..n {
                        da[r * n + c] = g[r] * (v[c] / (nu * nv) - cos * u[c] / (nu * nu));
                        db[r * n + c] = g[r] * (u[c] / (nu * nv) - cos * v[c] / (nv * nv));
                    }
                }
                accumulate(adj, *a, &da);
                accumulate(adj, *b, &db);
            }
            Op::LogSumExpMasked(a, mask) => {
                let x = self.val(*a);
                let n = x.cols();
                let mut da = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    let lse = out.data()[r];
                    for c in 0..n {
                        let i = r * n + c;
                        if mask[i] {
                            da[i] = g[r] * (x.data()[i] - lse).exp();
                        }
                    }
                }
                accumulate(adj, *a, &da);
            }
            Op::GateMix(gi, pi, qi) => {
                let (gv, pv, qv) = (self.val(*gi).data(), self.val(*pi).data(), self.val(*qi).data());
                let dg: Vec<f64> = (0..g.len()).map(|i| g[i] * (pv[i] - qv[i])).collect();
                let dp: Vec<f64> = (0..g.len()).map(|i| g[i] * gv[i]).collect();
                let dq: Vec<f64> = (0..g.len()).map(|i| g[i] * (1.0 - gv[i])).collect();
                accumulate(adj, *gi, &dg);
                accumulate(adj, *pi, &dp);
                accumulate(adj, *qi, &dq);
            }
            Op::BlockAttention {
                q,
                k,
                v,
                block,
                scale,
                probs,
            } => {
                let (qt, kt, vt) = (self.val(*q), self.val(*k), self.val(*v));
                let (dq, dk, dv) = kernels::block_attention_adjoint(qt, kt, vt, probs, g, *block, *scale);
                accumulate(adj, *q, &dq);
                accumulate(adj, *k, &dk);
                accumulate(adj, *v, &dv);
            }
        }
    }
}

fn check_offsets(offsets: &[usize], rows: usize) -> Result<()> {
    let ok = offsets.len() >= 2
        && offsets[0] == 0
        && *offsets.last().unwrap() == rows
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(TensorError::Usage(format!(
            "segment offsets must run monotonically from 0 to {rows}"
        )))
    }
}

fn softmax_adjoint(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
    for ((o, y), g) in out.iter_mut().zip(y).zip(g) {
        *o = y * (g - dot);
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    match &mut adj[i] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Adds zero gradients for every parameter of `store` missing here.
    pub fn complete_for(mut self, store: &ParamStore) -> Self {
        for (name, value) in store.iter() {
            self.by_name
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
        }
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.by_name.insert(name.into(), grad);
    }
}
