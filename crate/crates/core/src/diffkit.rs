//! A small tape-based reverse-mode differentiation engine over dense 2-D
//! tensors.
//!
//! Every forward op appends a node to a [`Tape`]; [`Tape::backward`] walks
//! the tape from a scalar output back to the leaves. Nodes created from
//! constants (or derived only from constants) never receive gradients, so
//! frozen parameters cost nothing in the backward pass. The tape is rebuilt
//! for every evaluation; it is single-owner and never shared between
//! threads while it is being recorded.
//!
//! Vectors are row vectors (`1 x n`), batches stack them as rows.

use std::fmt;

use thiserror::Error;

/// Row norms below this cannot be normalized.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("degenerate normalization (row {row} has norm {norm:e})")]
    DegenerateNormalization { row: usize, norm: f64 },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: [usize; 2] },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument to {op}: {message}")]
    Invalid { op: &'static str, message: String },
}

/// Dense row-major matrix of 64-bit reals.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape(), self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DiffError> {
        if rows * cols != data.len() {
            return Err(DiffError::Invalid {
                op: "tensor",
                message: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Stacks equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "from_rows",
                    left: [1, cols],
                    right: [1, r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, DiffError> {
        if self.cols != rhs.rows {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, rhs.cols);
        matmul_into(&self.data, &rhs.data, &mut out.data, self.rows, self.cols, rhs.cols);
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

// c[m x n] += a[m x k] * b[k x n]
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    L2Normalize(Var),
    SquaredDistance(Var, Var),
    PairwiseSquaredDistance(Var),
    MeanOffDiagonal(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    BroadcastRows(Var),
    MaxPoolRows(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records forward ops for one evaluation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that needed one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when no path carries gradient to it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zeros shaped like its value when it has none.
    pub fn wrt_or_zeros(&self, tape: &Tape, var: Var) -> Tensor {
        self.wrt(var).cloned().unwrap_or_else(|| {
            let [r, c] = tape.value(var).shape();
            Tensor::zeros(r, c)
        })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Constant copy of `v`, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push_derived(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        self.push(op, value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_derived(Op::MatMul(a, b), value, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push_derived(Op::Transpose(a), value, &[a])
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        Ok(Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push_derived(Op::Add(a, b), value, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push_derived(Op::Sub(a, b), value, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push_derived(Op::Mul(a, b), value, &[a, b]))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, DiffError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows != 1 || tr.cols != ta.cols {
            return Err(mismatch(name, ta, tr));
        }
        let mut out = ta.clone();
        for chunk in out.data.chunks_mut(ta.cols.max(1)) {
            for (v, r) in chunk.iter_mut().zip(&tr.data) {
                *v = f(*v, *r);
            }
        }
        Ok(out)
    }

    /// `a + bias` with a `1 x c` bias added to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        let value = self.row_broadcast("add_bias", a, bias, |x, b| x + b)?;
        Ok(self.push_derived(Op::AddBias(a, bias), value, &[a, bias]))
    }

    /// Every row of `a` multiplied elementwise by the `1 x c` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var, DiffError> {
        let value = self.row_broadcast("mul_row", a, r, |x, b| x * b)?;
        Ok(self.push_derived(Op::MulRow(a, r), value, &[a, r]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push_derived(Op::Scale(a, s), value, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        let value = self.value(a).map(f64::exp);
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: "exp" });
        }
        Ok(self.push_derived(Op::Exp(a), value, &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        let value = self.value(a).map(f64::ln);
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: "log" });
        }
        Ok(self.push_derived(Op::Log(a), value, &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push_derived(Op::Tanh(a), value, &[a])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sin);
        self.push_derived(Op::Sin(a), value, &[a])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::cos);
        self.push_derived(Op::Cos(a), value, &[a])
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        self.push_derived(Op::Sum(a), value, &[a])
    }

    /// Mean of all entries, `1 x 1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64);
        self.push_derived(Op::Mean(a), value, &[a])
    }

    /// Column means, `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.rows == 0 {
            return Err(DiffError::Invalid {
                op: "mean_rows",
                message: "no rows".into(),
            });
        }
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (o, v) in out.data.iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / t.rows as f64;
        out.data.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push_derived(Op::MeanRows(a), out, &[a]))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a);
        let mut out = t.clone();
        for (row, chunk) in out.data.chunks_mut(t.cols.max(1)).enumerate() {
            let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= NORMALIZE_EPS) {
                return Err(DiffError::DegenerateNormalization { row, norm });
            }
            chunk.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(self.push_derived(Op::L2Normalize(a), out, &[a]))
    }

    /// Row-wise squared distance, `r x c, r x c -> r x 1`.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("squared_distance", ta, tb));
        }
        let cols = ta.cols.max(1);
        let data = ta
            .data
            .chunks(cols)
            .zip(tb.data.chunks(cols))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum())
            .collect();
        let value = Tensor {
            rows: ta.rows,
            cols: 1,
            data,
        };
        Ok(self.push_derived(Op::SquaredDistance(a, b), value, &[a, b]))
    }

    /// All-pairs squared distances between rows, `n x c -> n x n`.
    pub fn pairwise_squared_distance(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.rows;
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            for k in (i + 1)..n {
                let d: f64 = t
                    .row_slice(i)
                    .iter()
                    .zip(t.row_slice(k))
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                out.data[i * n + k] = d;
                out.data[k * n + i] = d;
            }
        }
        self.push_derived(Op::PairwiseSquaredDistance(a), out, &[a])
    }

    /// Mean over the off-diagonal entries of a square matrix.
    pub fn mean_off_diagonal(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.rows != t.cols || t.rows < 2 {
            return Err(DiffError::Invalid {
                op: "mean_off_diagonal",
                message: format!("needs a square matrix with n >= 2, got {:?}", t.shape()),
            });
        }
        let n = t.rows;
        let total: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| (i, k)))
            .map(|(i, k)| t.data[i * n + k])
            .sum();
        let value = Tensor::scalar(total / (n * (n - 1)) as f64);
        Ok(self.push_derived(Op::MeanOffDiagonal(a), value, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), t));
            }
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + t.cols].copy_from_slice(t.row_slice(r));
            }
            offset += t.cols;
        }
        Ok(self.push_derived(Op::ConcatCols(parts.to_vec()), out, parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols != cols {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let value = Tensor { rows, cols, data };
        Ok(self.push_derived(Op::ConcatRows(parts.to_vec()), value, parts))
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * t.cols);
        for &i in indices {
            if i >= t.rows {
                return Err(DiffError::Invalid {
                    op: "select_rows",
                    message: format!("row {i} out of range for {:?}", t.shape()),
                });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor {
            rows: indices.len(),
            cols: t.cols,
            data,
        };
        Ok(self.push_derived(Op::SelectRows(a, indices.to_vec()), value, &[a]))
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.rows != 1 {
            return Err(DiffError::Invalid {
                op: "broadcast_rows",
                message: format!("expects a single row, got {:?}", t.shape()),
            });
        }
        let mut data = Vec::with_capacity(n * t.cols);
        for _ in 0..n {
            data.extend_from_slice(&t.data);
        }
        let value = Tensor {
            rows: n,
            cols: t.cols,
            data,
        };
        Ok(self.push_derived(Op::BroadcastRows(a), value, &[a]))
    }

    /// Column-wise max over consecutive groups of `group` rows,
    /// `(g * group) x c -> g x c`. Ties go to the first row of the group.
    pub fn max_pool_rows(&mut self, a: Var, group: usize) -> Result<Var, DiffError> {
        let t = self.value(a);
        if group == 0 || !t.rows.is_multiple_of(group) {
            return Err(DiffError::Invalid {
                op: "max_pool_rows",
                message: format!("{} rows not divisible into groups of {group}", t.rows),
            });
        }
        let groups = t.rows / group;
        let mut out = Tensor::zeros(groups, t.cols);
        let mut argmax = vec![0usize; groups * t.cols];
        for g in 0..groups {
            for c in 0..t.cols {
                let mut best = g * group;
                for r in (g * group + 1)..((g + 1) * group) {
                    if t.data[r * t.cols + c] > t.data[best * t.cols + c] {
                        best = r;
                    }
                }
                out.data[g * t.cols + c] = t.data[best * t.cols + c];
                argmax[g * t.cols + c] = best;
            }
        }
        Ok(self.push_derived(Op::MaxPoolRows(a, argmax), out, &[a]))
    }

    /// Reverse accumulation from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients, DiffError> {
        let shape = self.value(output).shape();
        if shape != [1, 1] {
            return Err(DiffError::NonScalarOutput { shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(Tensor::scalar(1.0));
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                if self.requires_grad(*a) {
                    // dA = G B^T
                    let mut da = Tensor::zeros(m, k);
                    for i in 0..m {
                        let grow = &g.data[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            da.data[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    // dB = A^T G
                    let mut db = Tensor::zeros(k, n);
                    for i in 0..m {
                        let grow = &g.data[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, gv) in db.data[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut da = g.clone();
                    da.data.iter_mut().zip(&tb.data).for_each(|(d, y)| *d *= y);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = g.clone();
                    db.data.iter_mut().zip(&ta.data).for_each(|(d, x)| *d *= x);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*bias) {
                    self.accumulate(grads, *bias, column_sums(g));
                }
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (self.value(*a), self.value(*r));
                let cols = ta.cols.max(1);
                if self.requires_grad(*a) {
                    let mut da = g.clone();
                    for chunk in da.data.chunks_mut(cols) {
                        chunk.iter_mut().zip(&tr.data).for_each(|(d, y)| *d *= y);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*r) {
                    let mut dr = Tensor::zeros(1, ta.cols);
                    for (gc, ac) in g.data.chunks(cols).zip(ta.data.chunks(cols)) {
                        for ((d, gv), av) in dr.data.iter_mut().zip(gc).zip(ac) {
                            *d += gv * av;
                        }
                    }
                    self.accumulate(grads, *r, dr);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Exp(a) => {
                let mut d = g.clone();
                d.data.iter_mut().zip(&out.data).for_each(|(d, y)| *d *= y);
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                d.data.iter_mut().zip(&x.data).for_each(|(d, x)| *d /= x);
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                d.data
                    .iter_mut()
                    .zip(&out.data)
                    .for_each(|(d, y)| *d *= 1.0 - y * y);
                self.accumulate(grads, *a, d);
            }
            Op::Sin(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                d.data.iter_mut().zip(&x.data).for_each(|(d, x)| *d *= x.cos());
                self.accumulate(grads, *a, d);
            }
            Op::Cos(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                d.data.iter_mut().zip(&x.data).for_each(|(d, x)| *d *= -x.sin());
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let [r, c] = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor { rows: r, cols: c, data: vec![g.item(); r * c] });
            }
            Op::Mean(a) => {
                let [r, c] = self.value(*a).shape();
                let v = g.item() / (r * c) as f64;
                self.accumulate(grads, *a, Tensor { rows: r, cols: c, data: vec![v; r * c] });
            }
            Op::MeanRows(a) => {
                let [r, c] = self.value(*a).shape();
                let inv = 1.0 / r as f64;
                let mut d = Tensor::zeros(r, c);
                for chunk in d.data.chunks_mut(c.max(1)) {
                    chunk.iter_mut().zip(&g.data).for_each(|(d, gv)| *d = gv * inv);
                }
                self.accumulate(grads, *a, d);
            }
            Op::L2Normalize(a) => {
                // d x = (g - y (y . g)) / |x|
                let x = self.value(*a);
                let cols = x.cols.max(1);
                let mut d = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let xr = &x.data[r * cols..(r + 1) * cols];
                    let yr = &out.data[r * cols..(r + 1) * cols];
                    let gr = &g.data[r * cols..(r + 1) * cols];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yg: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((dv, y), gv) in d.data[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *dv = (gv - y * yg) / norm;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SquaredDistance(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = ta.cols.max(1);
                let mut da = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..ta.rows {
                    let s = 2.0 * g.data[r];
                    for c in 0..ta.cols {
                        da.data[r * cols + c] = s * (ta.data[r * cols + c] - tb.data[r * cols + c]);
                    }
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::PairwiseSquaredDistance(a) => {
                let t = self.value(*a);
                let (n, c) = (t.rows, t.cols);
                let mut d = Tensor::zeros(n, c);
                for i in 0..n {
                    for k in 0..n {
                        if i == k {
                            continue;
                        }
                        let w = 2.0 * (g.data[i * n + k] + g.data[k * n + i]);
                        for j in 0..c {
                            d.data[i * c + j] += w * (t.data[i * c + j] - t.data[k * c + j]);
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanOffDiagonal(a) => {
                let n = self.value(*a).rows;
                let v = g.item() / (n * (n - 1)) as f64;
                let mut d = Tensor {
                    rows: n,
                    cols: n,
                    data: vec![v; n * n],
                };
                for i in 0..n {
                    d.data[i * n + i] = 0.0;
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let [r, c] = self.value(*p).shape();
                    if self.requires_grad(*p) {
                        let mut d = Tensor::zeros(r, c);
                        for row in 0..r {
                            d.data[row * c..(row + 1) * c]
                                .copy_from_slice(&g.data[row * g.cols + offset..row * g.cols + offset + c]);
                        }
                        self.accumulate(grads, *p, d);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let [r, c] = self.value(*p).shape();
                    if self.requires_grad(*p) {
                        let d = Tensor {
                            rows: r,
                            cols: c,
                            data: g.data[offset..offset + r * c].to_vec(),
                        };
                        self.accumulate(grads, *p, d);
                    }
                    offset += r * c;
                }
            }
            Op::SelectRows(a, indices) => {
                let [r, c] = self.value(*a).shape();
                let mut d = Tensor::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (dv, gv) in d.data[i * c..(i + 1) * c].iter_mut().zip(&g.data[k * c..(k + 1) * c]) {
                        *dv += gv;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::BroadcastRows(a) => self.accumulate(grads, *a, column_sums(g)),
            Op::MaxPoolRows(a, argmax) => {
                let [r, c] = self.value(*a).shape();
                let mut d = Tensor::zeros(r, c);
                for (pos, &src) in argmax.iter().enumerate() {
                    let col = pos % c;
                    d.data[src * c + col] += g.data[pos];
                }
                self.accumulate(grads, *a, d);
            }
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols);
    for chunk in g.data.chunks(g.cols.max(1)) {
        out.data.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.rows, x.cols);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let up = f(&probe);
        probe.data[i] = orig - step;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Per-coordinate relative errors `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_errors(analytic: &Tensor, numeric: &Tensor, floor: f64) -> Vec<f64> {
    analytic
        .data
        .iter()
        .zip(&numeric.data)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::stream(seed, "diffkit-test", &[]);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check_grad(f: impl Fn(&mut Tape, Var) -> Result<Var, DiffError>, x: &Tensor) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = f(&mut tape, v).unwrap();
        let analytic = tape.backward(out).unwrap().wrt_or_zeros(&tape, v);
        let numeric = finite_difference(
            |p| {
                let mut t = Tape::new();
                let v = t.leaf(p.clone());
                let o = f(&mut t, v).unwrap();
                t.value(o).item()
            },
            x,
            1e-5,
        );
        for e in relative_errors(&analytic, &numeric, 1e-6) {
            assert!(e < 1e-4, "analytic {analytic:?} numeric {numeric:?}");
        }
    }

    #[test]
    fn forward_examples() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::row(vec![3.0, 4.0]));
        let n = t.l2_normalize(v).unwrap();
        assert_abs_diff_eq!(t.value(n).data()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(n).data()[1], 0.8, epsilon = 1e-15);
        let d = t.squared_distance(v, v).unwrap();
        assert_eq!(t.value(d).item(), 0.0);

        let z = random(5, 1, 1);
        let i = t.constant(Tensor::identity(5));
        let zv = t.constant(z.clone());
        let p = t.matmul(i, zv).unwrap();
        assert_eq!(t.value(p), &z);
    }

    #[test]
    fn error_paths() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        match t.matmul(a, b) {
            Err(DiffError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, [2, 3]);
                assert_eq!(right, [2, 3]);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(t.l2_normalize(a), Err(DiffError::DegenerateNormalization { .. })));
        assert!(matches!(t.backward(a), Err(DiffError::NonScalarOutput { shape: [2, 3] })));
        let r = t_row(&mut t);
        let msg = t.add(a, r).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[1, 3]"), "{msg}");
        assert!(Tensor::new(2, 2, vec![0.0; 3]).is_err());
    }

    fn t_row(t: &mut Tape) -> Var {
        t.constant(Tensor::row(vec![1.0, 2.0, 3.0]))
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constants_get_no_gradient_and_backward_is_pure() {
        let mut t = Tape::new();
        let x = t.leaf(random(1, 4, 2));
        let c = t.constant(random(1, 4, 3));
        let y = t.mul(x, c).unwrap();
        let e = t.exp(y).unwrap();
        let s = t.sum(e);
        let g1 = t.backward(s).unwrap();
        let g2 = t.backward(s).unwrap();
        assert!(g1.wrt(c).is_none());
        assert_eq!(g1.wrt_or_zeros(&t, c), Tensor::zeros(1, 4));
        assert_eq!(g1.wrt(x), g2.wrt(x));
        let d = t.detach(x);
        let s2 = t.sum(d);
        assert!(t.backward(s2).unwrap().wrt(x).is_none());
    }

    #[test]
    fn normalize_then_distance_matches_finite_differences() {
        let target = random(1, 6, 9);
        check_grad(
            |t, v| {
                let n = t.l2_normalize(v)?;
                let c = t.constant(target.clone());
                let d = t.squared_distance(n, c)?;
                Ok(t.sum(d))
            },
            &random(1, 6, 4),
        );
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let w = random(4, 3, 11);
        let bias = random(1, 3, 12);
        check_grad(
            |t, v| {
                let wv = t.constant(w.clone());
                let bv = t.leaf(bias.clone());
                let h = t.matmul(v, wv)?;
                let h = t.add_bias(h, bv)?;
                let h = t.tanh(h);
                let s = t.sin(h);
                let c = t.cos(h);
                let cat = t.concat_cols(&[s, c, h])?;
                let pooled = t.max_pool_rows(cat, 2)?;
                let m = t.mean_rows(pooled)?;
                let tr = t.transpose(cat);
                let rows = t.select_rows(tr, &[0, 2, 2, 5])?;
                let r2 = t.mean(rows);
                let b = t.broadcast_rows(m, 3)?;
                let sc = t.scale(b, 0.7);
                let stacked = t.concat_rows(&[sc, pooled])?;
                let nrm = t.l2_normalize(stacked)?;
                let pd = t.pairwise_squared_distance(nrm);
                let e = t.scale(pd, -2.0);
                let e = t.exp(e)?;
                let mo = t.mean_off_diagonal(e)?;
                let l = t.log(mo)?;
                let rw = t.mul_row(nrm, m)?;
                let sub = t.sub(rw, nrm)?;
                let prod = t.mul(sub, sub)?;
                let s2 = t.sum(prod);
                let a = t.add(l, s2)?;
                t.add(a, r2)
            },
            &random(4, 4, 13),
        );
    }
}
