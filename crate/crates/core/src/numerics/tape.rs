//! Reverse-mode differentiation over matrix-valued primitives.
//!
//! A [`Tape`] records every primitive application made during a forward pass.
//! Nodes only ever reference earlier nodes, so walking the node list backwards
//! from the loss is a valid reverse topological order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn};
use super::{NumericsError, ParameterStore, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

impl FromStr for Activation {
    type Err = NumericsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(NumericsError::InvalidArgument(format!("unsupported activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        })
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

/// Parameters of one recurrent cell already bound on a tape.
///
/// Gate layout along the `4·hidden` axis is input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
}

enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    Exp(Var),
    Sum(Var),
    SumRows(Var),
    Transpose(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    SegmentMean {
        src: Var,
        seg: Vec<usize>,
        counts: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    LogSoftmax(Var),
    PickCols {
        x: Var,
        idx: Vec<usize>,
    },
    LstmStep {
        x: Var,
        state: Var,
        params: LstmParams,
        active: Vec<bool>,
        /// Activated gates `[i | f | g | o]` per row.
        gates: Vec<f64>,
        /// `tanh(c')` per row.
        tanh_cell: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The computation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.0.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Tensor::all_finite)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Binds a stored parameter; binding the same name twice returns the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var, NumericsError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name).ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?.clone();
        let v = self.push(value, Op::Param(name.to_string()));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() || av.rank() != 2 || bv.rank() != 2 {
            return Err(mismatch("matmul_nt", av, bv));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; n * m];
        gemm_nt(av.data(), bv.data(), &mut out, n, k, m);
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::MatMulNt(a, b)))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 2 || wv.rank() != 2 || xv.cols() != wv.rows() {
            return Err(mismatch("affine", xv, wv));
        }
        if bv.len() != wv.cols() {
            return Err(mismatch("affine(bias)", wv, bv));
        }
        let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        gemm_nn(xv.data(), wv.data(), &mut out, n, k, m);
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::Affine { x, w, b }))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect()).expect("shape preserved")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.map(x, |v| v * factor);
        self.push(t, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v + c);
        self.push(t, Op::AddScalar(x))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.map(x, |v| kind.apply(v));
        self.push(t, Op::Act(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::exp);
        self.push(t, Op::Exp(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Row sums of a matrix as an `[n×1]` column.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, k) = (xv.rows(), xv.cols());
        let data: Vec<f64> = (0..n).map(|i| xv.data()[i * k..(i + 1) * k].iter().sum()).collect();
        let t = Tensor::matrix(n, 1, data).expect("n>0");
        self.push(t, Op::SumRows(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        self.push(t, Op::Transpose(x))
    }

    /// Row lookup: output row `i` is `table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        let (n, d) = (tv.rows(), tv.cols());
        if idx.is_empty() {
            return Err(NumericsError::InvalidArgument("gather of zero rows".into()));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(NumericsError::InvalidArgument(format!(
                "row index {bad} out of range for table with {n} rows"
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            out.extend_from_slice(tv.row_slice(i));
        }
        let t = Tensor::matrix(idx.len(), d, out)?;
        Ok(self.push(t, Op::GatherRows { table, idx }))
    }

    /// Mean of the rows of `src` grouped by `seg` into `n_out` output rows.
    /// Output rows that receive nothing are zero.
    pub fn segment_mean(&mut self, src: Var, seg: Vec<usize>, n_out: usize) -> Result<Var, NumericsError> {
        let sv = self.value(src);
        let d = sv.cols();
        if seg.len() != sv.rows() {
            return Err(NumericsError::InvalidArgument(format!(
                "segment ids ({}) do not cover {} rows",
                seg.len(),
                sv.rows()
            )));
        }
        if let Some(bad) = seg.iter().find(|&&s| s >= n_out) {
            return Err(NumericsError::InvalidArgument(format!("segment id {bad} out of range {n_out}")));
        }
        let mut counts = vec![0usize; n_out];
        for &s in &seg {
            counts[s] += 1;
        }
        let mut out = vec![0.0; n_out * d];
        for (i, &s) in seg.iter().enumerate() {
            let o = &mut out[s * d..(s + 1) * d];
            for (a, b) in o.iter_mut().zip(sv.row_slice(i)) {
                *a += b;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 1 {
                let inv = 1.0 / c as f64;
                out[s * d..(s + 1) * d].iter_mut().for_each(|v| *v *= inv);
            }
        }
        let t = Tensor::matrix(n_out, d, out)?;
        Ok(self.push(t, Op::SegmentMean { src, seg, counts }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = self.value(parts[0]);
        let n = first.rows();
        for p in parts {
            if self.value(*p).rows() != n || self.value(*p).rank() != 2 {
                return Err(mismatch("concat_cols", first, self.value(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let t = Tensor::matrix(n, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = self.value(parts[0]);
        let d = first.cols();
        for p in parts {
            if self.value(*p).cols() != d {
                return Err(mismatch("concat_rows", first, self.value(*p)));
            }
        }
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut out = Vec::with_capacity(rows * d);
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let t = Tensor::matrix(rows, d, out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let (n, k) = (xv.rows(), xv.cols());
        if start >= end || end > k {
            return Err(NumericsError::InvalidArgument(format!("column slice {start}..{end} of width {k}")));
        }
        let mut out = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            out.extend_from_slice(&xv.row_slice(i)[start..end]);
        }
        let t = Tensor::matrix(n, end - start, out)?;
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let (n, k) = (xv.rows(), xv.cols());
        if start >= end || end > n {
            return Err(NumericsError::InvalidArgument(format!("row slice {start}..{end} of height {n}")));
        }
        let t = Tensor::matrix(end - start, k, xv.data()[start * k..end * k].to_vec())?;
        Ok(self.push(t, Op::SliceRows { x, start }))
    }

    /// Row-wise log-softmax, stabilized by subtracting the row maximum.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, k) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = &xv.data()[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("shape preserved");
        self.push(t, Op::LogSoftmax(x))
    }

    /// Picks `x[i, idx[i]]` for every row, giving an `[n×1]` column.
    pub fn pick_cols(&mut self, x: Var, idx: Vec<usize>) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let (n, k) = (xv.rows(), xv.cols());
        if idx.len() != n {
            return Err(NumericsError::InvalidArgument(format!("{} indices for {n} rows", idx.len())));
        }
        if let Some(bad) = idx.iter().find(|&&j| j >= k) {
            return Err(NumericsError::InvalidArgument(format!("target index {bad} out of range for {k} columns")));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| xv.get(i, j)).collect();
        let t = Tensor::matrix(n, 1, data)?;
        Ok(self.push(t, Op::PickCols { x, idx }))
    }

    /// Mean softmax cross-entropy over rows. Returns the scalar loss node and
    /// the row-wise probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<(Var, Tensor), NumericsError> {
        let logp = self.log_softmax(logits);
        let picked = self.pick_cols(logp, targets.to_vec())?;
        let total = self.sum(picked);
        let loss = self.scale(total, -1.0 / targets.len() as f64);
        let lp = self.value(logp);
        let probs = Tensor::new(lp.shape().to_vec(), lp.data().iter().map(|v| v.exp()).collect())?;
        Ok((loss, probs))
    }

    /// One recurrent cell step over a batch of rows.
    ///
    /// `state` packs `[h | c]` as `[B × 2H]`. Rows whose `active` flag is
    /// false pass their state through unchanged.
    pub fn lstm_step(
        &mut self,
        x: Var,
        state: Var,
        params: LstmParams,
        active: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let (xv, sv) = (self.value(x), self.value(state));
        let wx = self.value(params.w_input);
        let wh = self.value(params.w_hidden);
        let bv = self.value(params.bias);
        let hidden = wh.rows();
        let (batch, din) = (xv.rows(), xv.cols());
        if wx.rows() != din || wx.cols() != 4 * hidden {
            return Err(mismatch("lstm_step(input weights)", xv, wx));
        }
        if wh.cols() != 4 * hidden || bv.len() != 4 * hidden {
            return Err(mismatch("lstm_step(hidden weights)", wh, bv));
        }
        if sv.rows() != batch || sv.cols() != 2 * hidden {
            return Err(mismatch("lstm_step(state)", xv, sv));
        }
        let active: Vec<bool> = match active {
            Some(a) if a.len() == batch => a.to_vec(),
            Some(a) => {
                return Err(NumericsError::InvalidArgument(format!("{} activity flags for batch of {batch}", a.len())))
            }
            None => vec![true; batch],
        };
        let g4 = 4 * hidden;
        let mut pre = Vec::with_capacity(batch * g4);
        for _ in 0..batch {
            pre.extend_from_slice(bv.data());
        }
        gemm_nn(xv.data(), wx.data(), &mut pre, batch, din, g4);
        let mut h_prev = Vec::with_capacity(batch * hidden);
        for i in 0..batch {
            h_prev.extend_from_slice(&sv.row_slice(i)[..hidden]);
        }
        gemm_nn(&h_prev, wh.data(), &mut pre, batch, hidden, g4);

        let mut out = sv.data().to_vec();
        let mut tanh_cell = vec![0.0; batch * hidden];
        for i in 0..batch {
            let row = &mut pre[i * g4..(i + 1) * g4];
            for j in 0..hidden {
                row[j] = sigmoid(row[j]);
                row[hidden + j] = sigmoid(row[hidden + j]);
                row[2 * hidden + j] = row[2 * hidden + j].tanh();
                row[3 * hidden + j] = sigmoid(row[3 * hidden + j]);
            }
            if !active[i] {
                continue;
            }
            let srow = sv.row_slice(i);
            let orow = &mut out[i * 2 * hidden..(i + 1) * 2 * hidden];
            for j in 0..hidden {
                let c = row[hidden + j] * srow[hidden + j] + row[j] * row[2 * hidden + j];
                let tc = c.tanh();
                tanh_cell[i * hidden + j] = tc;
                orow[j] = row[3 * hidden + j] * tc;
                orow[hidden + j] = c;
            }
        }
        let t = Tensor::matrix(batch, 2 * hidden, out)?;
        Ok(self.push(t, Op::LstmStep { x, state, params, active, gates: pre, tanh_cell }))
    }

    /// Reverse pass from a scalar node. Every parameter bound on this tape
    /// receives an entry; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    out.0.insert(name.clone(), g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                    let mut da = vec![0.0; n * k];
                    gemm_nt(g.data(), bv.data(), &mut da, n, m, k);
                    let mut db = vec![0.0; k * m];
                    gemm_tn(av.data(), g.data(), &mut db, k, n, m);
                    accumulate(&mut grads, *a, av.shape(), da);
                    accumulate(&mut grads, *b, bv.shape(), db);
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                    let mut da = vec![0.0; n * k];
                    gemm_nn(g.data(), bv.data(), &mut da, n, m, k);
                    let mut db = vec![0.0; m * k];
                    gemm_tn(g.data(), av.data(), &mut db, m, n, k);
                    accumulate(&mut grads, *a, av.shape(), da);
                    accumulate(&mut grads, *b, bv.shape(), db);
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv, bv) = (self.value(*x), self.value(*w), self.value(*b));
                    let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
                    if needs_grad(&self.nodes, *x) {
                        let mut dx = vec![0.0; n * k];
                        gemm_nt(g.data(), wv.data(), &mut dx, n, m, k);
                        accumulate(&mut grads, *x, xv.shape(), dx);
                    }
                    let mut dw = vec![0.0; k * m];
                    gemm_tn(xv.data(), g.data(), &mut dw, k, n, m);
                    accumulate(&mut grads, *w, wv.shape(), dw);
                    let mut db = vec![0.0; m];
                    for r in 0..n {
                        for (d, v) in db.iter_mut().zip(g.row_slice(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, bv.shape(), db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.shape(), g.data().to_vec());
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *b, &shape, g.into_data());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.shape(), g.data().to_vec());
                    let neg = g.data().iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, g.shape(), neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, av.shape(), da);
                    accumulate(&mut grads, *b, bv.shape(), db);
                }
                Op::Scale(x, f) => {
                    let d = g.data().iter().map(|v| v * f).collect();
                    accumulate(&mut grads, *x, g.shape(), d);
                }
                Op::AddScalar(x) => {
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *x, &shape, g.into_data());
                }
                Op::Act(x, kind) => {
                    let y = &node.value;
                    let d =
                        g.data().iter().zip(y.data()).map(|(gv, yv)| gv * kind.derivative_from_output(*yv)).collect();
                    accumulate(&mut grads, *x, y.shape(), d);
                }
                Op::Exp(x) => {
                    let y = &node.value;
                    let d = g.data().iter().zip(y.data()).map(|(a, b)| a * b).collect();
                    accumulate(&mut grads, *x, y.shape(), d);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let d = vec![g.data()[0]; xv.len()];
                    accumulate(&mut grads, *x, xv.shape(), d);
                }
                Op::SumRows(x) => {
                    let xv = self.value(*x);
                    let k = xv.cols();
                    let mut d = Vec::with_capacity(xv.len());
                    for &gv in g.data() {
                        d.extend(std::iter::repeat(gv).take(k));
                    }
                    accumulate(&mut grads, *x, xv.shape(), d);
                }
                Op::Transpose(x) => {
                    let d = g.transpose();
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, &shape, d.into_data());
                }
                Op::GatherRows { table, idx } => {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut dt = vec![0.0; tv.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut dt[i * d..(i + 1) * d];
                        for (a, b) in dst.iter_mut().zip(g.row_slice(r)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads, *table, tv.shape(), dt);
                }
                Op::SegmentMean { src, seg, counts } => {
                    let sv = self.value(*src);
                    let d = sv.cols();
                    let mut ds = Vec::with_capacity(sv.len());
                    for &s in seg {
                        let inv = 1.0 / counts[s] as f64;
                        ds.extend(g.row_slice(s).iter().map(|v| v * inv));
                    }
                    debug_assert_eq!(ds.len(), seg.len() * d);
                    accumulate(&mut grads, *src, sv.shape(), ds);
                }
                Op::ConcatCols(parts) => {
                    let n = g.rows();
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let w = pv.cols();
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, *p, pv.shape(), d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let d = g.data()[offset..offset + pv.len()].to_vec();
                        offset += pv.len();
                        accumulate(&mut grads, *p, pv.shape(), d);
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let (n, k, w) = (xv.rows(), xv.cols(), g.cols());
                    let mut d = vec![0.0; n * k];
                    for r in 0..n {
                        d[r * k + start..r * k + start + w].copy_from_slice(g.row_slice(r));
                    }
                    accumulate(&mut grads, *x, xv.shape(), d);
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let k = xv.cols();
                    let mut d = vec![0.0; xv.len()];
                    d[start * k..start * k + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, xv.shape(), d);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let (n, k) = (y.rows(), y.cols());
                    let mut d = Vec::with_capacity(n * k);
                    for r in 0..n {
                        let gr = g.row_slice(r);
                        let total: f64 = gr.iter().sum();
                        d.extend(gr.iter().zip(y.row_slice(r)).map(|(gv, lp)| gv - lp.exp() * total));
                    }
                    accumulate(&mut grads, *x, y.shape(), d);
                }
                Op::PickCols { x, idx } => {
                    let xv = self.value(*x);
                    let k = xv.cols();
                    let mut d = vec![0.0; xv.len()];
                    for (r, &j) in idx.iter().enumerate() {
                        d[r * k + j] = g.data()[r];
                    }
                    accumulate(&mut grads, *x, xv.shape(), d);
                }
                Op::LstmStep { x, state, params, active, gates, tanh_cell } => {
                    self.lstm_backward(&mut grads, &g, *x, *state, *params, active, gates, tanh_cell);
                }
            }
        }

        for (name, v) in &self.params {
            if !out.0.contains_key(name) {
                out.0.insert(name.clone(), Tensor::zeros(self.value(*v).shape()));
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        x: Var,
        state: Var,
        params: LstmParams,
        active: &[bool],
        gates: &[f64],
        tanh_cell: &[f64],
    ) {
        let (xv, sv) = (self.value(x), self.value(state));
        let wx = self.value(params.w_input);
        let wh = self.value(params.w_hidden);
        let hidden = wh.rows();
        let (batch, din) = (xv.rows(), xv.cols());
        let g4 = 4 * hidden;

        let mut dpre = vec![0.0; batch * g4];
        let mut dstate = vec![0.0; batch * 2 * hidden];
        for i in 0..batch {
            let grow = g.row_slice(i);
            if !active[i] {
                dstate[i * 2 * hidden..(i + 1) * 2 * hidden].copy_from_slice(grow);
                continue;
            }
            let gate = &gates[i * g4..(i + 1) * g4];
            let srow = sv.row_slice(i);
            let dp = &mut dpre[i * g4..(i + 1) * g4];
            for j in 0..hidden {
                let (ig, fg, cg, og) = (gate[j], gate[hidden + j], gate[2 * hidden + j], gate[3 * hidden + j]);
                let tc = tanh_cell[i * hidden + j];
                let dh = grow[j];
                let dc = grow[hidden + j] + dh * og * (1.0 - tc * tc);
                dp[j] = dc * cg * ig * (1.0 - ig);
                dp[hidden + j] = dc * srow[hidden + j] * fg * (1.0 - fg);
                dp[2 * hidden + j] = dc * ig * (1.0 - cg * cg);
                dp[3 * hidden + j] = dh * tc * og * (1.0 - og);
                dstate[i * 2 * hidden + hidden + j] = dc * fg;
            }
        }

        // dh_prev = dpre · Whᵀ for active rows (inactive rows contribute zeros to dpre)
        let mut dh_prev = vec![0.0; batch * hidden];
        gemm_nt(&dpre, wh.data(), &mut dh_prev, batch, g4, hidden);
        for i in 0..batch {
            if active[i] {
                dstate[i * 2 * hidden..i * 2 * hidden + hidden].copy_from_slice(&dh_prev[i * hidden..(i + 1) * hidden]);
            }
        }
        accumulate(grads, state, sv.shape(), dstate);

        if needs_grad(&self.nodes, x) {
            let mut dx = vec![0.0; batch * din];
            gemm_nt(&dpre, wx.data(), &mut dx, batch, g4, din);
            accumulate(grads, x, xv.shape(), dx);
        }
        let mut dwx = vec![0.0; din * g4];
        gemm_tn(xv.data(), &dpre, &mut dwx, din, batch, g4);
        accumulate(grads, params.w_input, wx.shape(), dwx);

        let mut h_prev = Vec::with_capacity(batch * hidden);
        for i in 0..batch {
            h_prev.extend_from_slice(&sv.row_slice(i)[..hidden]);
        }
        let mut dwh = vec![0.0; hidden * g4];
        gemm_tn(&h_prev, &dpre, &mut dwh, hidden, batch, g4);
        accumulate(grads, params.w_hidden, wh.shape(), dwh);

        let mut db = vec![0.0; g4];
        for i in 0..batch {
            for (d, v) in db.iter_mut().zip(&dpre[i * g4..(i + 1) * g4]) {
                *d += v;
            }
        }
        let bshape = self.value(params.bias).shape().to_vec();
        accumulate(grads, params.bias, &bshape, db);
    }
}

/// Constants never need gradients; skipping them avoids large useless products.
fn needs_grad(nodes: &[Node], v: Var) -> bool {
    !matches!(nodes[v.0].op, Op::Constant)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape matches value"));
        }
    }
}
