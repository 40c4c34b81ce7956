//! Tape-based reverse-mode differentiation over the small op set the
//! transformer and the unlearning losses need, plus a central-difference
//! gradient oracle.
//!
//! A [`Graph`] borrows the [`ParamStore`] it differentiates. Nodes are
//! appended in evaluation order; [`Graph::backward`] walks the tape once in
//! reverse, so gradient accumulation order is fixed and results are
//! bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{GradStore, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    Gather { x: Var, index: Vec<(usize, usize)> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Opaque { name: String },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape bound to one parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    track: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a[n,k] · b[m,k]ᵀ`
fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// `a[n,k]ᵀ · b[n,m]`
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Numerically stable `ln σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
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

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<'p> Graph<'p> {
    /// Graph whose parameter leaves are differentiable.
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256), track: true }
    }

    /// Forward-only graph: nothing requires a gradient.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256), track: false }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => self.params.tensor(*i),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn need(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn expect_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::StructuralMismatch(format!("{what}: shapes {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, &[])
    }

    pub fn param(&mut self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter index out of range");
        self.nodes.push(Node { value: None, op: Op::Param(index), requires_grad: self.track });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::StructuralMismatch(format!("missing parameter `{name}`")))?;
        Ok(self.param(i))
    }

    /// Records a value computed outside the supported op set. The forward
    /// pass works; differentiating through it is a capability error.
    pub fn opaque(&mut self, name: &str, value: Tensor, inputs: &[Var]) -> Var {
        self.push(value, Op::Opaque { name: name.to_string() }, inputs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        if tb.shape().len() != 2 || tb.shape()[0] != k {
            return Err(Error::StructuralMismatch(format!(
                "matmul: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let m = tb.cols();
        let out = matmul(ta.data(), tb.data(), n, k, m);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        if tb.cols() != k {
            return Err(Error::StructuralMismatch(format!(
                "matmul_nt: {:?} x {:?}ᵀ",
                ta.shape(),
                tb.shape()
            )));
        }
        let m = tb.rows();
        let out = matmul_nt(ta.data(), tb.data(), n, k, m);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map_value(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same_shape(a, b, "add")?;
        let t = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same_shape(a, b, "sub")?;
        let t = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same_shape(a, b, "mul")?;
        let t = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.len() != c {
            return Err(Error::StructuralMismatch(format!(
                "add_row: {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(t, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map_value(a, |x| c * x);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.map_value(a, |x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map_value(a, gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map_value(a, f64::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.map_value(a, f64::ln);
        self.push(t, Op::Log(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let t = self.map_value(a, log_sigmoid);
        self.push(t, Op::LogSigmoid(a), &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for (x, o) in ta.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(x, o);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Row-wise softmax over a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (n, c) = (ta.rows(), ta.cols());
        if n != c {
            return Err(Error::StructuralMismatch(format!("causal_softmax on {:?}", ta.shape())));
        }
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            softmax_row(&ta.row(i)[..=i], &mut out[i * c..i * c + i + 1]);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        Ok(self.push(t, Op::CausalSoftmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for (x, o) in ta.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &v in x {
                z += (v - max).exp();
            }
            let lse = max + z.ln();
            for (oo, &v) in o.iter_mut().zip(x) {
                *oo = v - lse;
            }
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        self.push(t, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::StructuralMismatch("layer_norm: gain/bias width".into()));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = Vec::with_capacity(tx.rows());
        let mut out = vec![0.0; tx.len()];
        for (r, row) in tx.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Rows of `table` picked by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, c) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(Error::StructuralMismatch(format!("embedding id {id} >= {n}")));
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::from_parts(vec![ids.len(), c], out);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::arg("select_rows needs at least one row"));
        }
        let tx = self.value(x);
        let (n, c) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::StructuralMismatch(format!("row {r} >= {n}")));
            }
            out.extend_from_slice(tx.row(r));
        }
        let t = Tensor::from_parts(vec![rows.len(), c], out);
        Ok(self.push(t, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Picks one element per `(row, col)` pair into a vector.
    pub fn gather(&mut self, x: Var, index: &[(usize, usize)]) -> Result<Var> {
        if index.is_empty() {
            return Err(Error::arg("gather needs at least one index"));
        }
        let tx = self.value(x);
        let (n, c) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(index.len());
        for &(r, j) in index {
            if r >= n || j >= c {
                return Err(Error::StructuralMismatch(format!("gather ({r},{j}) outside {n}x{c}")));
            }
            out.push(tx.at(r, j));
        }
        let t = Tensor::from_parts(vec![index.len()], out);
        Ok(self.push(t, Op::Gather { x, index: index.to_vec() }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = (tx.rows(), tx.cols());
        if len == 0 || start + len > c {
            return Err(Error::StructuralMismatch(format!("slice_cols {start}+{len} of {c}")));
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let t = Tensor::from_parts(vec![n, len], out);
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return Err(Error::StructuralMismatch("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::from_parts(vec![n, total], out);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sum of scalar nodes, left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::arg("add_all needs at least one term"))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar node. Parameters not reachable from
    /// `loss` get zero gradient.
    pub fn backward(&self, loss: Var) -> Result<GradStore> {
        if self.value(loss).len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut out = self.params.zeros_like();
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, Var(i), &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn propagate(
        &self,
        op: &Op,
        me: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut GradStore,
    ) -> Result<()> {
        let need = |v: Var| self.need(v);
        let mut acc = |v: Var, delta: Vec<f64>| accumulate(grads, v, delta);
        match op {
            Op::Constant => {}
            Op::Param(p) => {
                for (o, d) in out.tensor_mut(*p).data_mut().iter_mut().zip(g) {
                    *o += d;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if need(*a) {
                    acc(*a, matmul_nt(g, tb.data(), n, m, k));
                }
                if need(*b) {
                    acc(*b, matmul_tn(ta.data(), g, n, k, m));
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                if need(*a) {
                    acc(*a, matmul(g, tb.data(), n, m, k));
                }
                if need(*b) {
                    acc(*b, matmul_tn(g, ta.data(), n, m, k));
                }
            }
            Op::Add(a, b) => {
                if need(*a) {
                    acc(*a, g.to_vec());
                }
                if need(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    acc(*a, g.to_vec());
                }
                if need(*b) {
                    acc(*b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if need(*a) {
                    acc(*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                }
                if need(*b) {
                    acc(*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(a, bias) => {
                if need(*a) {
                    acc(*a, g.to_vec());
                }
                if need(*bias) {
                    let c = self.value(*bias).len();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| c * x).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Gelu(a) => {
                let ta = self.value(*a);
                acc(*a, g.iter().zip(ta.data()).map(|(d, &x)| d * gelu_grad(x)).collect());
            }
            Op::Exp(a) => {
                let y = self.value(me);
                acc(*a, g.iter().zip(y.data()).map(|(d, y)| d * y).collect());
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                acc(*a, g.iter().zip(ta.data()).map(|(d, x)| d / x).collect());
            }
            Op::LogSigmoid(a) => {
                let ta = self.value(*a);
                acc(*a, g.iter().zip(ta.data()).map(|(d, &x)| d * sigmoid(-x)).collect());
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let y = self.value(me);
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let mut s = 0.0;
                    for (yy, gg) in yr.iter().zip(gr) {
                        s += yy * gg;
                    }
                    for ((d, yy), gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yy * (gg - s);
                    }
                }
                acc(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let y = self.value(me);
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for ((d, yy), gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = gg - yy.exp() * s;
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = self.value(*x).cols();
                let gv = self.value(*gain).data();
                if need(*gain) {
                    let mut dg = vec![0.0; c];
                    for (hr, gr) in xhat.chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    acc(*gain, dg);
                }
                if need(*bias) {
                    let mut db = vec![0.0; c];
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            db[j] += gr[j];
                        }
                    }
                    acc(*bias, db);
                }
                if need(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((hr, gr), dr)) in
                        xhat.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)).enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dr[j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let c = tt.cols();
                let mut dt = vec![0.0; tt.len()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] += g[k * c + j];
                    }
                }
                acc(*table, dt);
            }
            Op::SelectRows { x, rows } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[r * c + j] += g[k * c + j];
                    }
                }
                acc(*x, dx);
            }
            Op::Gather { x, index } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                for (k, &(r, j)) in index.iter().enumerate() {
                    dx[r * c + j] += g[k];
                }
                acc(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let w = self.value(me).cols();
                let mut dx = vec![0.0; tx.len()];
                for (i, gr) in g.chunks(w).enumerate() {
                    dx[i * c + start..i * c + start + w].copy_from_slice(gr);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = self.value(me).cols();
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let w = tp.cols();
                    if need(p) {
                        let mut dp = Vec::with_capacity(tp.len());
                        for gr in g.chunks(total) {
                            dp.extend_from_slice(&gr[off..off + w]);
                        }
                        acc(p, dp);
                    }
                    off += w;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Opaque { name } => {
                return Err(Error::Unsupported(format!(
                    "`{name}` has no derivative rule but lies on the loss path"
                )))
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Central-difference gradient `(f(θ+εeᵢ) − f(θ−εeᵢ)) / 2ε`, one
/// coordinate at a time. Independent of the tape by construction.
pub fn finite_diff_grad<F>(f: F, theta: &ParamStore, eps: f64) -> Result<GradStore>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    let mut grad = theta.zeros_like();
    let mut probe = theta.clone();
    for i in 0..theta.total_len() {
        let orig = *probe.flat_mut(i);
        *probe.flat_mut(i) = orig + eps;
        let up = f(&probe)?;
        *probe.flat_mut(i) = orig - eps;
        let down = f(&probe)?;
        *probe.flat_mut(i) = orig;
        *grad.flat_mut(i) = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest elementwise relative error between two gradients, using
/// `|a−b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &GradStore, b: &GradStore, floor: f64) -> Result<f64> {
    a.check_congruent(b)?;
    let mut worst: f64 = 0.0;
    for (x, y) in a.values().zip(b.values()) {
        let denom = x.abs().max(y.abs()).max(floor);
        worst = worst.max((x - y).abs() / denom);
    }
    Ok(worst)
}
