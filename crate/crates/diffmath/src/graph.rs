//! Gradient tape. Nodes are appended in evaluation order, so the reverse of
//! the node list is a valid reverse topological order for backward.

use std::sync::Arc;

use crate::{DiffError, Real, Result, Tensor, ROPE_BASE};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Silu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Relu(Var),
    Square(Var),
    Clamp(Var, T, T),
    Minimum(Var, Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
        head_dim: usize,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Silu(..) => "silu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::Minimum(..) => "minimum",
            Op::Softmax(..) => "softmax",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::Rope { .. } => "rope",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::GatherElems(..) => "gather_elems",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of non-leaf nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// A recording of primitive applications.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    finite_check: bool,
    flops: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            finite_check: false,
            flops: 0,
        }
    }

    /// Every op checks its output and fails with [`DiffError::NonFinite`]
    /// on the first NaN or infinity.
    pub fn with_finite_check() -> Self {
        Self {
            finite_check: true,
            ..Self::new()
        }
    }

    pub fn set_finite_check(&mut self, on: bool) {
        self.finite_check = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations performed by forward evaluation so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool, flops: u64) -> Result<Var> {
        let id = self.nodes.len();
        if self.finite_check && !value.is_finite() {
            return Err(DiffError::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        self.flops += flops;
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(id))
    }

    fn push_leaf(&mut self, value: Arc<Tensor<T>>, needs_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if self.finite_check && !value.is_finite() {
            return Err(DiffError::NonFinite { op: "leaf", node: id });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(id))
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(Arc::new(value), false)
    }

    pub fn constant_arc(&mut self, value: Arc<Tensor<T>>) -> Result<Var> {
        self.push_leaf(value, false)
    }

    /// Input whose gradient backward will report.
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(Arc::new(value), true)
    }

    pub fn variable_arc(&mut self, value: Arc<Tensor<T>>) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value_arc(v);
        self.push_leaf(value, false)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T, cost: u64) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.map(f);
        let n = out.len() as u64;
        let ng = self.needs(x);
        self.push(op, out, ng, cost * n)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(shape_err(op, av, bv));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = av.with_data(data);
        let n = out.len() as u64;
        let ng = self.needs(a) || self.needs(b);
        self.push(op, out, ng, n)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        let (m, k) = av.dims();
        let n = bv.cols();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), out, ng, 2 * (m * k * n) as u64)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims();
        let (n, k2) = bv.dims();
        if k != k2 {
            return Err(shape_err("matmul_nt", av, bv));
        }
        let mut out = Tensor::zeros(m, n);
        T::gemm(
            m,
            k,
            n,
            av.data(),
            (k as isize, 1),
            bv.data(),
            (1, k as isize),
            T::zero(),
            out.data_mut(),
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMulNT(a, b), out, ng, 2 * (m * k * n) as u64)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y })
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        r: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(r));
        let (m, n) = av.dims();
        if rv.dims() != (1, n) {
            return Err(shape_err(op.name(), av, rv));
        }
        let rd = rv.data();
        let mut data = Vec::with_capacity(m * n);
        for row in av.data().chunks_exact(n.max(1)) {
            data.extend(row.iter().zip(rd).map(|(&x, &y)| f(x, y)));
        }
        let out = av.with_data(data);
        let ng = self.needs(a) || self.needs(r);
        self.push(op, out, ng, (m * n) as u64)
    }

    /// `a[m×n] + r[1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_broadcast(a, r, Op::AddRow(a, r), |x, y| x + y)
    }

    /// `a[m×n] ⊙ r[1×n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_broadcast(a, r, Op::MulRow(a, r), |x, y| x * y)
    }

    /// `a[m×n] ⊙ c[m×1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(c));
        let (m, n) = av.dims();
        if cv.dims() != (m, 1) {
            return Err(shape_err("mul_col", av, cv));
        }
        let mut data = Vec::with_capacity(m * n);
        for (i, &s) in cv.data().iter().enumerate() {
            data.extend(av.data()[i * n..(i + 1) * n].iter().map(|&x| x * s));
        }
        let out = av.with_data(data);
        let ng = self.needs(a) || self.needs(c);
        self.push(Op::MulCol(a, c), out, ng, (m * n) as u64)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        self.unary(x, Op::Scale(x, s), |v| v * s, 1)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(x, Op::Offset(x), |v| v + c, 1)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v), 5)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid, 4)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), T::exp, 1)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), T::ln, 1)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), softplus, 4)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()), 1)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v, 1)
    }

    /// Gradient passes only where `lo ≤ x ≤ hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi), 1)
    }

    // ---- row-wise neural primitives -------------------------------------

    /// Softmax along each row, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, n) = xv.dims();
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(n.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut sum = T::zero();
            for &v in row {
                let e = (v - max).exp();
                sum += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e = *e / sum;
            }
        }
        let out = xv.with_data(data);
        let cost = 5 * out.len() as u64;
        let ng = self.needs(x);
        self.push(Op::Softmax(x), out, ng, cost)
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` per row; `gain` is `1 × n`.
    pub fn rmsnorm_rows(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let (m, n) = xv.dims();
        if gv.dims() != (1, n) {
            return Err(shape_err("rmsnorm", xv, gv));
        }
        let eps = T::of(eps);
        let nn = T::of(n as f64);
        let mut inv_rms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for row in xv.data().chunks_exact(n.max(1)) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / nn;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(gv.data()).map(|(&v, &g)| g * v * inv));
        }
        let out = xv.with_data(data);
        let ng = self.needs(x) || self.needs(gain);
        self.push(Op::RmsNorm { x, gain, inv_rms }, out, ng, 4 * (m * n) as u64)
    }

    /// Rotary embedding: row `r` holds `row_len / head_dim` heads at
    /// sequence position `positions[r]`; feature pairs `(2i, 2i+1)` in each
    /// head rotate by `position · base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize) -> Result<Var> {
        if head_dim % 2 != 0 || head_dim == 0 {
            return Err(DiffError::OddHeadDim(head_dim));
        }
        let xv = self.value(x);
        let (m, n) = xv.dims();
        if positions.len() != m || n % head_dim != 0 {
            return Err(DiffError::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: format!(
                    "rope over {} positions with head dim {head_dim}",
                    positions.len()
                ),
            });
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(m * half);
        let mut sin = Vec::with_capacity(m * half);
        for &p in positions {
            for i in 0..half {
                let freq = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        let src = xv.data();
        let mut data = vec![T::zero(); m * n];
        for r in 0..m {
            for h in 0..n / head_dim {
                let base = r * n + h * head_dim;
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let (a, b) = (src[base + 2 * i], src[base + 2 * i + 1]);
                    data[base + 2 * i] = a * c - b * s;
                    data[base + 2 * i + 1] = a * s + b * c;
                }
            }
        }
        let out = xv.with_data(data);
        let ng = self.needs(x);
        self.push(
            Op::Rope {
                x,
                cos,
                sin,
                head_dim,
            },
            out,
            ng,
            3 * (m * n) as u64,
        )
    }

    // ---- structural -----------------------------------------------------

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims();
        if start + len > n {
            return Err(DiffError::IndexOutOfRange {
                index: start + len,
                len: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for row in xv.data().chunks_exact(n.max(1)) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::matrix(m, len, data)?;
        let ng = self.needs(x);
        self.push(Op::SliceCols(x, start), out, ng, 0)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims();
        if start + len > m {
            return Err(DiffError::IndexOutOfRange {
                index: start + len,
                len: m,
            });
        }
        let out = Tensor::matrix(len, n, xv.data()[start * n..(start + len) * n].to_vec())?;
        let ng = self.needs(x);
        self.push(Op::SliceRows(x, start), out, ng, 0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| DiffError::InvalidShape {
            shape: vec![],
            reason: "empty concat".into(),
        })?);
        let m = first.rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != m {
                return Err(shape_err("concat_cols", first, pv));
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::matrix(m, total, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, ng, 0)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| DiffError::InvalidShape {
            shape: vec![],
            reason: "empty concat".into(),
        })?);
        let n = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != n {
                return Err(shape_err("concat_rows", first, pv));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::matrix(rows, n, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows(parts.to_vec()), out, ng, 0)
    }

    /// Output row `r` is input row `idx[r]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(DiffError::IndexOutOfRange { index: i, len: m });
            }
            data.extend_from_slice(xv.row_slice(i));
        }
        let out = Tensor::matrix(idx.len(), n, data)?;
        let ng = self.needs(x);
        self.push(Op::GatherRows(x, idx.to_vec()), out, ng, 0)
    }

    /// Output has `rows` rows; input row `r` is added into row `idx[r]`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims();
        if idx.len() != m {
            return Err(DiffError::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: format!("{} scatter indices", idx.len()),
            });
        }
        let mut out = Tensor::zeros(rows, n);
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(DiffError::IndexOutOfRange { index: i, len: rows });
            }
            let src = xv.row_slice(r);
            for (o, &v) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(src) {
                *o += v;
            }
        }
        let ng = self.needs(x);
        self.push(Op::ScatterRows(x, idx.to_vec()), out, ng, (m * n) as u64)
    }

    /// Column vector of the elements at `(row, col)` pairs.
    pub fn gather_elems(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims();
        let mut data = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= m || c >= n {
                return Err(DiffError::IndexOutOfRange {
                    index: r * n + c,
                    len: m * n,
                });
            }
            data.push(xv.at(r, c));
        }
        let out = Tensor::column(data);
        let ng = self.needs(x);
        self.push(Op::GatherElems(x, idx.to_vec()), out, ng, 0)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>();
        let cost = xv.len() as u64;
        let ng = self.needs(x);
        self.push(Op::Sum(x), Tensor::scalar(s), ng, cost)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of each row: `[m×n] → [m×1]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, n) = xv.dims();
        let data = xv
            .data()
            .chunks_exact(n.max(1))
            .map(|r| r.iter().copied().sum::<T>())
            .collect();
        let out = Tensor::column(data);
        let cost = xv.len() as u64;
        let ng = self.needs(x);
        self.push(Op::SumRows(x), out, ng, cost)
    }

    /// Sum of each column: `[m×n] → [1×n]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, n) = xv.dims();
        let mut data = vec![T::zero(); n];
        for row in xv.data().chunks_exact(n.max(1)) {
            for (d, &v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        let cost = xv.len() as u64;
        let ng = self.needs(x);
        self.push(Op::SumCols(x), Tensor::row(data), ng, cost)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a `1×1` loss. Each recorded op on a gradient path
    /// is visited exactly once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.dims() != (1, 1) {
            return Err(DiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                visited += 1;
                self.backprop(i, &g, &mut grads);
            }
            if self.finite_check && !g.is_finite() {
                return Err(DiffError::NonFinite {
                    op: "backward",
                    node: i,
                });
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &*node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims();
                let n = bv.cols();
                if self.needs(*a) {
                    let mut da = Tensor::zeros(m, k);
                    T::gemm(
                        m,
                        n,
                        k,
                        gd,
                        (n as isize, 1),
                        bv.data(),
                        (1, n as isize),
                        T::zero(),
                        da.data_mut(),
                    );
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(k, n);
                    T::gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        (1, k as isize),
                        gd,
                        (n as isize, 1),
                        T::zero(),
                        db.data_mut(),
                    );
                    self.acc(grads, *b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims();
                let n = bv.rows();
                if self.needs(*a) {
                    let mut da = Tensor::zeros(m, k);
                    T::gemm(
                        m,
                        n,
                        k,
                        gd,
                        (n as isize, 1),
                        bv.data(),
                        (k as isize, 1),
                        T::zero(),
                        da.data_mut(),
                    );
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(n, k);
                    T::gemm(
                        n,
                        m,
                        k,
                        gd,
                        (1, n as isize),
                        av.data(),
                        (k as isize, 1),
                        T::zero(),
                        db.data_mut(),
                    );
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.needs(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, av.with_data(d));
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, bv.with_data(d));
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = av.data().iter().zip(bv.data()).map(|(x, y)| x <= y).collect();
                if self.needs(*a) {
                    let d = gd
                        .iter()
                        .zip(&pick_a)
                        .map(|(&x, &p)| if p { x } else { T::zero() })
                        .collect();
                    self.acc(grads, *a, av.with_data(d));
                }
                if self.needs(*b) {
                    let d = gd
                        .iter()
                        .zip(&pick_a)
                        .map(|(&x, &p)| if p { T::zero() } else { x })
                        .collect();
                    self.acc(grads, *b, bv.with_data(d));
                }
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                if self.needs(*r) {
                    self.acc(grads, *r, col_sums(g));
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.value(*a), self.value(*r));
                let n = av.cols().max(1);
                if self.needs(*a) {
                    let mut d = Vec::with_capacity(gd.len());
                    for row in gd.chunks_exact(n) {
                        d.extend(row.iter().zip(rv.data()).map(|(&x, &y)| x * y));
                    }
                    self.acc(grads, *a, av.with_data(d));
                }
                if self.needs(*r) {
                    let mut d = vec![T::zero(); n];
                    for (grow, arow) in gd.chunks_exact(n).zip(av.data().chunks_exact(n)) {
                        for j in 0..n {
                            d[j] += grow[j] * arow[j];
                        }
                    }
                    self.acc(grads, *r, rv.with_data(d));
                }
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(*a), self.value(*c));
                let n = av.cols().max(1);
                if self.needs(*a) {
                    let mut d = Vec::with_capacity(gd.len());
                    for (row, &s) in gd.chunks_exact(n).zip(cv.data()) {
                        d.extend(row.iter().map(|&x| x * s));
                    }
                    self.acc(grads, *a, av.with_data(d));
                }
                if self.needs(*c) {
                    let d = gd
                        .chunks_exact(n)
                        .zip(av.data().chunks_exact(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum::<T>())
                        .collect();
                    self.acc(grads, *c, cv.with_data(d));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, g.map(|v| v * s));
            }
            Op::Offset(x) => self.acc(grads, *x, g.clone()),
            Op::Silu(x) => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| {
                        let s = sigmoid(v);
                        gv * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.acc(grads, *x, xv.with_data(d));
            }
            Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                self.acc(grads, *x, out.with_data(d));
            }
            Op::Exp(x) => {
                let d = gd.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect();
                self.acc(grads, *x, out.with_data(d));
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let d = gd.iter().zip(xv.data()).map(|(&gv, &v)| gv / v).collect();
                self.acc(grads, *x, xv.with_data(d));
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| gv * sigmoid(v))
                    .collect();
                self.acc(grads, *x, xv.with_data(d));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.acc(grads, *x, xv.with_data(d));
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let two = T::of(2.0);
                let d = gd.iter().zip(xv.data()).map(|(&gv, &v)| two * v * gv).collect();
                self.acc(grads, *x, xv.with_data(d));
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v >= *lo && v <= *hi { gv } else { T::zero() })
                    .collect();
                self.acc(grads, *x, xv.with_data(d));
            }
            Op::Softmax(x) => {
                let n = out.cols().max(1);
                let mut d = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks_exact(n).zip(out.data().chunks_exact(n)) {
                    let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                    d.extend(grow.iter().zip(yrow).map(|(&a, &y)| y * (a - dot)));
                }
                self.acc(grads, *x, out.with_data(d));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let n = xv.cols().max(1);
                let nn = T::of(n as f64);
                if self.needs(*gain) {
                    let mut dg = vec![T::zero(); n];
                    for ((grow, xrow), &inv) in
                        gd.chunks_exact(n).zip(xv.data().chunks_exact(n)).zip(inv_rms)
                    {
                        for j in 0..n {
                            dg[j] += grow[j] * xrow[j] * inv;
                        }
                    }
                    self.acc(grads, *gain, gv.with_data(dg));
                }
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(gd.len());
                    for ((grow, xrow), &inv) in
                        gd.chunks_exact(n).zip(xv.data().chunks_exact(n)).zip(inv_rms)
                    {
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += grow[j] * gv.data()[j] * xrow[j] * inv;
                        }
                        let mean = dot / nn;
                        for j in 0..n {
                            let dxh = grow[j] * gv.data()[j];
                            dx.push(inv * (dxh - xrow[j] * inv * mean));
                        }
                    }
                    self.acc(grads, *x, xv.with_data(dx));
                }
            }
            Op::Rope {
                x,
                cos,
                sin,
                head_dim,
            } => {
                let (m, n) = out.dims();
                let half = head_dim / 2;
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    for h in 0..n / head_dim {
                        let base = r * n + h * head_dim;
                        for i in 0..half {
                            let (c, s) = (cos[r * half + i], sin[r * half + i]);
                            let (ga, gb) = (gd[base + 2 * i], gd[base + 2 * i + 1]);
                            d[base + 2 * i] = ga * c + gb * s;
                            d[base + 2 * i + 1] = gb * c - ga * s;
                        }
                    }
                }
                self.acc(grads, *x, out.with_data(d));
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.dims(*x);
                let len = out.cols();
                let mut d = Tensor::zeros(m, n);
                for r in 0..m {
                    d.data_mut()[r * n + start..r * n + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.acc(grads, *x, d);
            }
            Op::SliceRows(x, start) => {
                let (m, n) = self.dims(*x);
                let mut d = Tensor::zeros(m, n);
                d.data_mut()[start * n..start * n + gd.len()].copy_from_slice(gd);
                self.acc(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.acc(grads, p, Tensor::matrix(m, w, d).expect("concat grad"));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let d = gd[offset * n..(offset + rows) * n].to_vec();
                        self.acc(grads, p, Tensor::matrix(rows, n, d).expect("concat grad"));
                    }
                    offset += rows;
                }
            }
            Op::GatherRows(x, idx) => {
                let (m, n) = self.dims(*x);
                let mut d = Tensor::zeros(m, n);
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &v) in d.data_mut()[src * n..(src + 1) * n]
                        .iter_mut()
                        .zip(&gd[r * n..(r + 1) * n])
                    {
                        *o += v;
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::ScatterRows(x, idx) => {
                let (m, n) = self.dims(*x);
                let mut d = Vec::with_capacity(m * n);
                for &dst in idx {
                    d.extend_from_slice(&gd[dst * n..(dst + 1) * n]);
                }
                self.acc(grads, *x, Tensor::matrix(m, n, d).expect("scatter grad"));
            }
            Op::GatherElems(x, idx) => {
                let (m, n) = self.dims(*x);
                let mut d = Tensor::zeros(m, n);
                for (&(r, c), &v) in idx.iter().zip(gd) {
                    d.data_mut()[r * n + c] += v;
                }
                self.acc(grads, *x, d);
            }
            Op::Sum(x) => {
                let (m, n) = self.dims(*x);
                self.acc(grads, *x, Tensor::filled(m, n, gd[0]));
            }
            Op::SumRows(x) => {
                let (m, n) = self.dims(*x);
                let mut d = Vec::with_capacity(m * n);
                for &v in gd {
                    d.extend(std::iter::repeat_n(v, n));
                }
                self.acc(grads, *x, Tensor::matrix(m, n, d).expect("sum_rows grad"));
            }
            Op::SumCols(x) => {
                let (m, n) = self.dims(*x);
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend_from_slice(gd);
                }
                self.acc(grads, *x, Tensor::matrix(m, n, d).expect("sum_cols grad"));
            }
        }
    }
}

fn col_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let n = g.cols();
    let mut d = vec![T::zero(); n];
    for row in g.data().chunks_exact(n.max(1)) {
        for (o, &v) in d.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::row(d)
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}
