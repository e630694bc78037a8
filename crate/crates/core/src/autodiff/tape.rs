//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends a node holding its forward value and enough
//! bookkeeping to compute its vector-Jacobian product. Nodes are appended in
//! evaluation order, so the node list is already a topological order and the
//! backward pass is a single reverse sweep.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::geom::wrap_angle_unchecked;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    SmoothL1(Var, f64),
    Atan2(Var, Var),
    WrapAngle(Var),
    Softmax(Var, f64),
    Sum(Var),
    Mean(Var),
    MaxOverSet(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a node, `None` when the node is unreachable
    /// from the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter in `store`; zero for parameters the loss
    /// does not depend on. Parameters registered more than once are summed.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[id.index()].add_assign(g);
            }
        }
        out
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape checked by caller")
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

    /// Which branch every piecewise operation took: ReLU, abs, clamp and
    /// smooth-L1 regions, angle wrap counts and max-over-set winners. Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<i64> {
        let sign = |x: f64| (x > 0.0) as i64 - (x < 0.0) as i64;
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.value(*a).data().iter().map(|&x| (x > 0.0) as i64)),
                Op::Abs(a) => out.extend(self.value(*a).data().iter().map(|&x| sign(x))),
                Op::Clamp(a, lo, hi) => {
                    out.extend(self.value(*a).data().iter().map(|&x| (x > *hi) as i64 - (x < *lo) as i64))
                }
                Op::SmoothL1(a, beta) => {
                    out.extend(self.value(*a).data().iter().map(|&x| if x.abs() < *beta { 0 } else { 2 * sign(x) }))
                }
                Op::WrapAngle(a) => out.extend(
                    self.value(*a)
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&x, &y)| ((x - y) / (2.0 * std::f64::consts::PI)).round() as i64),
                ),
                Op::MaxOverSet(_, arg) => out.extend(arg.iter().map(|&i| i as i64)),
                _ => {}
            }
        }
        out
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name.to_string() });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input that is not part of a parameter store.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Registers a parameter from `store` on this tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.get(id).clone();
        self.push("param", t, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), k as isize, 1, self.value(b).data(), n as isize, 1, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push("transpose", Tensor::matrix(n, m, out)?, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    /// `a[m,n] + bias[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("add_row")?;
        let (br, bc) = self.value(bias).dims2("add_row")?;
        if br != 1 || bc != n {
            return Err(Error::shape("add_row", format!("[{m},{n}] + [{br},{bc}]")));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push("add_row", Tensor::matrix(m, n, out)?, Op::AddRow(a, bias), rg)
    }

    /// `a[m,n] * c[m,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("mul_col")?;
        let (cr, cc) = self.value(c).dims2("mul_col")?;
        if cr != m || cc != 1 {
            return Err(Error::shape("mul_col", format!("[{m},{n}] * [{cr},{cc}]")));
        }
        let cv = self.value(c).data();
        let mut out = self.value(a).data().to_vec();
        for (row, s) in out.chunks_mut(n).zip(cv) {
            for x in row.iter_mut() {
                *x *= s;
            }
        }
        let rg = self.rg(a) || self.rg(c);
        self.push("mul_col", Tensor::matrix(m, n, out)?, Op::MulCol(a, c), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push("scale", out, Op::Scale(a, s), rg)
    }

    /// `a + s` elementwise.
    pub fn offset(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push("offset", out, Op::Offset(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push("exp", out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain("log", format!("argument {bad} is not positive")));
        }
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push("log", out, Op::Log(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push("sigmoid", out, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push("relu", out, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push("abs", out, Op::Abs(a), rg)
    }

    /// `a^p` for a constant exponent; requires `a >= 0` (strictly positive
    /// when `0 < p < 1`).
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let bad = self.value(a).data().iter().find(|&&x| x < 0.0 || (x == 0.0 && p > 0.0 && p < 1.0));
        if let Some(bad) = bad {
            return Err(Error::domain("powf", format!("base {bad} with exponent {p}")));
        }
        let out = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(a);
        self.push("powf", out, Op::Powf(a, p), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push("clamp", out, Op::Clamp(a, lo, hi), rg)
    }

    /// Huber-style smooth L1: `x²/(2β)` inside `|x| < β`, `|x| - β/2` outside.
    pub fn smooth_l1(&mut self, a: Var, beta: f64) -> Result<Var> {
        let out = self.value(a).map(|x| {
            let ax = x.abs();
            if ax < beta {
                0.5 * x * x / beta
            } else {
                ax - 0.5 * beta
            }
        });
        let rg = self.rg(a);
        self.push("smooth_l1", out, Op::SmoothL1(a, beta), rg)
    }

    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        same_shape("atan2", self.value(y), self.value(x))?;
        let out = zip_map(self.value(y), self.value(x), f64::atan2);
        let rg = self.rg(y) || self.rg(x);
        self.push("atan2", out, Op::Atan2(y, x), rg)
    }

    /// Wraps every element into `[-pi, pi)`; unit derivative.
    pub fn wrap_angle(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(wrap_angle_unchecked);
        let rg = self.rg(a);
        self.push("wrap_angle", out, Op::WrapAngle(a), rg)
    }

    /// Row-wise `softmax(a / temperature)` with max subtraction.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::domain("softmax", format!("temperature {temperature}")));
        }
        let (m, n) = self.value(a).dims2("softmax")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for (dst, row) in out.chunks_mut(n).zip(src.chunks(n)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = ((x - mx) / temperature).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let rg = self.rg(a);
        self.push("softmax", Tensor::matrix(m, n, out)?, Op::Softmax(a, temperature), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Column-wise max over consecutive groups of `group` rows:
    /// `[m·group, n] -> [m, n]`. Ties go to the lowest row.
    pub fn max_over_set(&mut self, a: Var, group: usize) -> Result<Var> {
        let (rows, n) = self.value(a).dims2("max_over_set")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("max_over_set", format!("{rows} rows not divisible into groups of {group}")));
        }
        let m = rows / group;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        let mut arg = vec![0usize; m * n];
        for g in 0..m {
            let base = g * group;
            out[g * n..(g + 1) * n].copy_from_slice(&src[base * n..(base + 1) * n]);
            arg[g * n..(g + 1) * n].fill(base);
            for r in base + 1..base + group {
                let row = &src[r * n..(r + 1) * n];
                for j in 0..n {
                    if row[j] > out[g * n + j] {
                        out[g * n + j] = row[j];
                        arg[g * n + j] = r;
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push("max_over_set", Tensor::matrix(m, n, out)?, Op::MaxOverSet(a, arg), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let (m, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_cols", Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let (_, n) = self.value(parts[0]).dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != n {
                return Err(Error::shape("concat_rows", format!("column counts {n} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", Tensor::matrix(rows, n, out)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2("gather")?;
        if indices.is_empty() {
            return Err(Error::shape("gather", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather", format!("index {bad} out of {m} rows")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        self.push("gather", Tensor::matrix(indices.len(), n, out)?, Op::GatherRows(a, indices.to_vec()), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2("slice_cols")?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n} columns")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let rg = self.rg(a);
        self.push("slice_cols", Tensor::matrix(m, w, out)?, Op::SliceCols(a, start), rg)
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Propagates from a one-element `loss` to every node that requires a
    /// gradient. A tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Backward("backward already ran on this tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward("loss node is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!("loss must be a scalar, got shape {:?}", self.shape(loss))));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let n = out.cols();
                if self.rg(*a) {
                    let buf = grad_buf(grads, *a, self.shape(*a));
                    // dA = G · Bᵀ
                    gemm(m, n, k, g.data(), n as isize, 1, self.value(*b).data(), 1, n as isize, 1.0, buf.data_mut());
                }
                if self.rg(*b) {
                    let buf = grad_buf(grads, *b, self.shape(*b));
                    // dB = Aᵀ · G
                    gemm(k, m, n, self.value(*a).data(), 1, k as isize, g.data(), n as isize, 1, 1.0, buf.data_mut());
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2("transpose")?;
                let buf = grad_buf(grads, *a, self.shape(*a));
                let d = buf.data_mut();
                for r in 0..m {
                    for c in 0..n {
                        d[r * n + c] += g.data()[c * m + r];
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_scaled(grads, *a, g, 1.0);
                self.acc_scaled(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_scaled(grads, *a, g, 1.0);
                self.acc_scaled(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    self.acc_with(grads, *a, |k| g.data()[k] * bv.data()[k]);
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    self.acc_with(grads, *b, |k| g.data()[k] * av.data()[k]);
                }
            }
            Op::AddRow(a, bias) => {
                self.acc_scaled(grads, *a, g, 1.0);
                if self.rg(*bias) {
                    let n = out.cols();
                    let buf = grad_buf(grads, *bias, self.shape(*bias));
                    let d = buf.data_mut();
                    for row in g.data().chunks(n) {
                        for (x, y) in d.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            Op::MulCol(a, c) => {
                let n = out.cols();
                if self.rg(*a) {
                    let cv = self.value(*c).data();
                    self.acc_with(grads, *a, |k| g.data()[k] * cv[k / n]);
                }
                if self.rg(*c) {
                    let av = self.value(*a).data();
                    let buf = grad_buf(grads, *c, self.shape(*c));
                    for (r, d) in buf.data_mut().iter_mut().enumerate() {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.data()[r * n + j] * av[r * n + j];
                        }
                        *d += s;
                    }
                }
            }
            Op::Scale(a, s) => self.acc_scaled(grads, *a, g, *s),
            Op::Offset(a) | Op::WrapAngle(a) => self.acc_scaled(grads, *a, g, 1.0),
            Op::Exp(a) => self.acc_with(grads, *a, |k| g.data()[k] * out.data()[k]),
            Op::Log(a) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, |k| g.data()[k] / av.data()[k]);
            }
            Op::Sigmoid(a) => self.acc_with(grads, *a, |k| {
                let s = out.data()[k];
                g.data()[k] * s * (1.0 - s)
            }),
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, |k| if av.data()[k] > 0.0 { g.data()[k] } else { 0.0 });
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, |k| {
                    let x = av.data()[k];
                    if x > 0.0 {
                        g.data()[k]
                    } else if x < 0.0 {
                        -g.data()[k]
                    } else {
                        0.0
                    }
                });
            }
            Op::Powf(a, p) => {
                let av = self.value(*a);
                let p = *p;
                self.acc_with(grads, *a, |k| if p == 0.0 { 0.0 } else { g.data()[k] * p * av.data()[k].powf(p - 1.0) });
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, |k| {
                    let x = av.data()[k];
                    if x >= *lo && x <= *hi {
                        g.data()[k]
                    } else {
                        0.0
                    }
                });
            }
            Op::SmoothL1(a, beta) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, |k| {
                    let x = av.data()[k];
                    let d = if x.abs() < *beta { x / beta } else { x.signum() };
                    g.data()[k] * d
                });
            }
            Op::Atan2(y, x) => {
                let yv = self.value(*y);
                let xv = self.value(*x);
                let r2 = |k: usize| {
                    let r = yv.data()[k] * yv.data()[k] + xv.data()[k] * xv.data()[k];
                    if r > 0.0 {
                        r
                    } else {
                        f64::INFINITY
                    }
                };
                if self.rg(*y) {
                    self.acc_with(grads, *y, |k| g.data()[k] * xv.data()[k] / r2(k));
                }
                if self.rg(*x) {
                    self.acc_with(grads, *x, |k| -g.data()[k] * yv.data()[k] / r2(k));
                }
            }
            Op::Softmax(a, t) => {
                let n = out.cols();
                let buf = grad_buf(grads, *a, self.shape(*a));
                let d = buf.data_mut();
                for r in 0..out.rows() {
                    let o = &out.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = o.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        d[r * n + j] += o[j] * (gr[j] - dot) / t;
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                self.acc_with(grads, *a, |_| s);
            }
            Op::Mean(a) => {
                let s = g.item() / self.value(*a).len() as f64;
                self.acc_with(grads, *a, |_| s);
            }
            Op::MaxOverSet(a, arg) => {
                let n = out.cols();
                let buf = grad_buf(grads, *a, self.shape(*a));
                let d = buf.data_mut();
                for (k, &r) in arg.iter().enumerate() {
                    d[r * n + k % n] += g.data()[k];
                }
            }
            Op::ConcatCols(parts) => {
                let m = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let buf = grad_buf(grads, p, self.shape(p));
                        let d = buf.data_mut();
                        for r in 0..m {
                            for c in 0..w {
                                d[r * w + c] += g.data()[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        let buf = grad_buf(grads, p, self.shape(p));
                        for (x, y) in buf.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                            *x += y;
                        }
                    }
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let n = out.cols();
                let buf = grad_buf(grads, *a, self.shape(*a));
                let d = buf.data_mut();
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..n {
                        d[src * n + c] += g.data()[r * n + c];
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2("slice_cols")?;
                let w = out.cols();
                let buf = grad_buf(grads, *a, self.shape(*a));
                let d = buf.data_mut();
                for r in 0..m {
                    for c in 0..w {
                        d[r * n + start + c] += g.data()[r * w + c];
                    }
                }
            }
        }
        Ok(())
    }

    fn acc_scaled(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, s: f64) {
        if !self.rg(v) {
            return;
        }
        let buf = grad_buf(grads, v, self.shape(v));
        for (x, y) in buf.data_mut().iter_mut().zip(g.data()) {
            *x += s * y;
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.rg(v) {
            return;
        }
        let buf = grad_buf(grads, v, self.shape(v));
        for (k, x) in buf.data_mut().iter_mut().enumerate() {
            *x += f(k);
        }
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
