//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every node is a `[rows, cols]` block of `f64`. Values are computed
//! eagerly when an operation is recorded, so shape and domain checks
//! happen at construction time and the forward pass is the recording
//! itself. [`Graph::grad`] walks the tape backwards from a scalar node.

use std::collections::BTreeMap;

use super::{DiffError, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    BatchMatVec { a: Var, x: Var, p: usize, q: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    RepeatRows { x: Var, n: usize },
    GroupMeanRows { x: Var, n: usize },
    SumAll(Var),
    SumCols(Var),
    Reshape(Var),
    Gru(Box<GruCache>),
    ConcreteLogDensity { x: Var, logits: Var, lambda: f64 },
    BinaryConcreteLogDensity { x: Var, logits: Var, lambda: f64 },
    GatedLogitMix { a: Var, b: Var, gate: Var },
    BernoulliLogLik { logits: Var, target: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::BatchMatVec { .. } => "batch_matvec",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::Clamp { .. } => "clamp",
            Op::SoftmaxRows(..) => "softmax",
            Op::ConcatCols(..) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::GroupMeanRows { .. } => "group_mean_rows",
            Op::SumAll(..) => "sum",
            Op::SumCols(..) => "sum_cols",
            Op::Reshape(..) => "reshape",
            Op::Gru(..) => "gru_cell",
            Op::ConcreteLogDensity { .. } => "concrete_log_density",
            Op::BinaryConcreteLogDensity { .. } => "binary_concrete_log_density",
            Op::GatedLogitMix { .. } => "gated_logit_mix",
            Op::BernoulliLogLik { .. } => "bernoulli_log_lik",
        }
    }
}

#[derive(Clone, Debug)]
struct GruCache {
    x: Var,
    h: Var,
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    gh_n: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// Single-owner computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// Row-wise Concrete log-density and its partials `(value, d/dx, d/dlogits)`.
fn concrete_row(x: &[f64], logits: &[f64], lambda: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let k = x.len();
    if k == 1 {
        return (0.0, vec![0.0], vec![0.0]);
    }
    let kf = k as f64;
    let shifted: Vec<f64> = x
        .iter()
        .zip(logits)
        .map(|(xi, li)| li - lambda * xi.ln())
        .collect();
    let m = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = shifted.iter().map(|s| (s - m).exp()).sum();
    let lse = m + sum_exp.ln();
    let mut value = ln_factorial(k - 1) + (kf - 1.0) * lambda.ln() - kf * lse;
    let mut dx = vec![0.0; k];
    let mut dl = vec![0.0; k];
    for i in 0..k {
        value += logits[i] - (lambda + 1.0) * x[i].ln();
        let w = (shifted[i] - lse).exp();
        dl[i] = 1.0 - kf * w;
        dx[i] = (-(lambda + 1.0) + kf * lambda * w) / x[i];
    }
    (value, dx, dl)
}

/// Row-wise sum of independent binary-Concrete log-densities with partials.
fn binary_concrete_row(x: &[f64], logits: &[f64], lambda: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let m = x.len();
    let mut value = 0.0;
    let mut dx = vec![0.0; m];
    let mut dl = vec![0.0; m];
    for i in 0..m {
        let xi = x[i];
        let li = logits[i];
        let a = li - lambda * xi.ln();
        let b = -lambda * (1.0 - xi).ln();
        let lse = log_add_exp(a, b);
        let w = sigmoid(a - b);
        value += lambda.ln() + li - (lambda + 1.0) * (xi.ln() + (1.0 - xi).ln()) - 2.0 * lse;
        dl[i] = 1.0 - 2.0 * w;
        dx[i] = -(lambda + 1.0) * (1.0 / xi - 1.0 / (1.0 - xi))
            - 2.0 * (w * (-lambda / xi) + (1.0 - w) * (lambda / (1.0 - xi)));
    }
    (value, dx, dl)
}

/// `log(γ e^a + (1-γ) e^b)`; exact endpoints at γ ∈ {0, 1}.
fn gated_mix(a: f64, b: f64, gamma: f64) -> f64 {
    if gamma >= 1.0 {
        a
    } else if gamma <= 0.0 {
        b
    } else {
        log_add_exp(gamma.ln() + a, (1.0 - gamma).ln() + b)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [m,k] · b[n,k]ᵀ`
fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m,k]ᵀ · b[m,n]`
fn matmul_at_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.node(v).rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.node(v).cols
    }

    /// Scalar value of a `[1,1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node shape is consistent")
    }

    /// Constant leaf. Gradients are never reported for constants.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var, DiffError> {
        if rows * cols != data.len() {
            return Err(DiffError::ShapeData {
                shape: vec![rows, cols],
                len: data.len(),
            });
        }
        Ok(self.push(data, rows, cols, Op::Leaf))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.rows(), t.cols(), Op::Leaf)
    }

    pub fn full(&mut self, rows: usize, cols: usize, value: f64) -> Var {
        self.push(vec![value; rows * cols], rows, cols, Op::Leaf)
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, DiffError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        let v = self.push(t.data().to_vec(), t.rows(), t.cols(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), DiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op,
                left: vec![sa.0, sa.1],
                right: vec![sb.0, sb.1],
            });
        }
        Ok(sa)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> DiffError {
        let sa = self.shape(a);
        let sb = self.shape(b);
        DiffError::ShapeMismatch {
            op,
            left: vec![sa.0, sa.1],
            right: vec![sb.0, sb.1],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        Ok(self.push(out, m, n, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` with `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let out = matmul_bt_raw(self.value(a), self.value(b), m, k, n);
        Ok(self.push(out, m, n, Op::MatMulBt(a, b)))
    }

    /// Per-row matrix-vector product: row `r` of `a` holds a row-major `[p,q]`
    /// matrix which multiplies row `r` of `x: [N,q]`.
    pub fn batch_matvec(&mut self, a: Var, x: Var, p: usize) -> Result<Var, DiffError> {
        let (na, pq) = self.shape(a);
        let (nx, q) = self.shape(x);
        if na != nx || p * q != pq {
            return Err(self.mismatch("batch_matvec", a, x));
        }
        let av = self.value(a);
        let xv = self.value(x);
        let mut out = vec![0.0; na * p];
        for r in 0..na {
            let xr = &xv[r * q..(r + 1) * q];
            for i in 0..p {
                let ar = &av[r * pq + i * q..r * pq + (i + 1) * q];
                out[r * p + i] = ar.iter().zip(xr).map(|(u, v)| u * v).sum();
            }
        }
        Ok(self.push(out, na, p, Op::BatchMatVec { a, x, p, q }))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, DiffError> {
        let (r, c) = self.same_shape(op.name(), a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(out, r, c, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Broadcast-add a `[1,d]` row to every row of `a: [N,d]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (n, d) = self.shape(a);
        if self.shape(row) != (1, d) {
            return Err(self.mismatch("add_row", a, row));
        }
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(d)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(out, n, d, Op::AddRow(a, row)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(out, r, c, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Clamp into `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { x: a, lo, hi })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|x| x / s));
        }
        self.push(out, r, c, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts.first().ok_or(DiffError::Empty("concat"))?;
        let rows = self.rows(first);
        for &p in parts {
            if self.rows(p) != rows {
                return Err(self.mismatch("concat", first, p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(out, rows, cols, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(DiffError::Range {
                op: "slice_cols",
                start,
                end,
                len: c,
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for row in self.value(a).chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        Ok(self.push(out, r, w, Op::SliceCols { x: a, start }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(DiffError::Range {
                op: "slice_rows",
                start,
                end,
                len: r,
            });
        }
        let out = self.value(a)[start * c..end * c].to_vec();
        Ok(self.push(out, end - start, c, Op::SliceRows { x: a, start }))
    }

    /// Row `i·n + j` of the result is row `i` of `a`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(r * n * c);
        for row in self.value(a).chunks(c) {
            for _ in 0..n {
                out.extend_from_slice(row);
            }
        }
        self.push(out, r * n, c, Op::RepeatRows { x: a, n })
    }

    /// Mean over consecutive groups of `n` rows.
    pub fn group_mean_rows(&mut self, a: Var, n: usize) -> Result<Var, DiffError> {
        let (r, c) = self.shape(a);
        if n == 0 || r % n != 0 {
            return Err(DiffError::Range {
                op: "group_mean_rows",
                start: 0,
                end: n,
                len: r,
            });
        }
        let groups = r / n;
        let mut out = vec![0.0; groups * c];
        let v = self.value(a);
        for g in 0..groups {
            for j in 0..n {
                let row = &v[(g * n + j) * c..(g * n + j + 1) * c];
                for (o, x) in out[g * c..(g + 1) * c].iter_mut().zip(row) {
                    *o += x / n as f64;
                }
            }
        }
        Ok(self.push(out, groups, c, Op::GroupMeanRows { x: a, n }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], 1, 1, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `[N,d] -> [N,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).chunks(c).map(|row| row.iter().sum()).collect();
        self.push(out, r, 1, Op::SumCols(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, DiffError> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(DiffError::ShapeData {
                shape: vec![rows, cols],
                len: r * c,
            });
        }
        let out = self.value(a).to_vec();
        Ok(self.push(out, rows, cols, Op::Reshape(a)))
    }

    /// Gated recurrent unit step. Weight columns are ordered `[reset | update | new]`.
    pub fn gru_cell(
        &mut self,
        x: Var,
        h: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
    ) -> Result<Var, DiffError> {
        let (n, dx) = self.shape(x);
        let (nh, dh) = self.shape(h);
        if n != nh
            || self.shape(w_ih) != (dx, 3 * dh)
            || self.shape(w_hh) != (dh, 3 * dh)
            || self.shape(b_ih) != (1, 3 * dh)
            || self.shape(b_hh) != (1, 3 * dh)
        {
            return Err(self.mismatch("gru_cell", x, h));
        }
        let mut gi = matmul_raw(self.value(x), self.value(w_ih), n, dx, 3 * dh);
        let mut gh = matmul_raw(self.value(h), self.value(w_hh), n, dh, 3 * dh);
        for row in 0..n {
            for j in 0..3 * dh {
                gi[row * 3 * dh + j] += self.value(b_ih)[j];
                gh[row * 3 * dh + j] += self.value(b_hh)[j];
            }
        }
        let hv = self.value(h);
        let mut r = vec![0.0; n * dh];
        let mut z = vec![0.0; n * dh];
        let mut nn = vec![0.0; n * dh];
        let mut gh_n = vec![0.0; n * dh];
        let mut out = vec![0.0; n * dh];
        for row in 0..n {
            let base = row * 3 * dh;
            for j in 0..dh {
                let idx = row * dh + j;
                r[idx] = sigmoid(gi[base + j] + gh[base + j]);
                z[idx] = sigmoid(gi[base + dh + j] + gh[base + dh + j]);
                gh_n[idx] = gh[base + 2 * dh + j];
                nn[idx] = (gi[base + 2 * dh + j] + r[idx] * gh_n[idx]).tanh();
                out[idx] = (1.0 - z[idx]) * nn[idx] + z[idx] * hv[idx];
            }
        }
        let cache = GruCache {
            x,
            h,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            r,
            z,
            n: nn,
            gh_n,
        };
        Ok(self.push(out, n, dh, Op::Gru(Box::new(cache))))
    }

    /// Row-wise Concrete log-density. `x` must lie strictly inside the simplex.
    pub fn concrete_log_density(&mut self, x: Var, logits: Var, lambda: f64) -> Result<Var, DiffError> {
        let (r, k) = self.same_shape("concrete_log_density", x, logits)?;
        let xv = self.value(x);
        let lv = self.value(logits);
        let out = (0..r)
            .map(|i| concrete_row(&xv[i * k..(i + 1) * k], &lv[i * k..(i + 1) * k], lambda).0)
            .collect();
        Ok(self.push(out, r, 1, Op::ConcreteLogDensity { x, logits, lambda }))
    }

    /// Row-wise sum of independent binary-Concrete log-densities.
    pub fn binary_concrete_log_density(&mut self, x: Var, logits: Var, lambda: f64) -> Result<Var, DiffError> {
        let (r, k) = self.same_shape("binary_concrete_log_density", x, logits)?;
        let xv = self.value(x);
        let lv = self.value(logits);
        let out = (0..r)
            .map(|i| binary_concrete_row(&xv[i * k..(i + 1) * k], &lv[i * k..(i + 1) * k], lambda).0)
            .collect();
        Ok(self.push(out, r, 1, Op::BinaryConcreteLogDensity { x, logits, lambda }))
    }

    /// Elementwise `log(γ·e^a + (1−γ)·e^b)` for gate values `γ ∈ [0,1]`.
    pub fn gated_logit_mix(&mut self, a: Var, b: Var, gate: Var) -> Result<Var, DiffError> {
        let (r, c) = self.same_shape("gated_logit_mix", a, b)?;
        self.same_shape("gated_logit_mix", a, gate)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .zip(self.value(gate))
            .map(|((&x, &y), &g)| gated_mix(x, y, g))
            .collect();
        Ok(self.push(out, r, c, Op::GatedLogitMix { a, b, gate }))
    }

    /// Row-wise Bernoulli log-likelihood of `target` under `logits`: `[N,d] -> [N,1]`.
    pub fn bernoulli_log_lik(&mut self, logits: Var, target: Var) -> Result<Var, DiffError> {
        let (r, c) = self.same_shape("bernoulli_log_lik", logits, target)?;
        let lv = self.value(logits);
        let tv = self.value(target);
        let out = (0..r)
            .map(|i| {
                (0..c)
                    .map(|j| {
                        let l = lv[i * c + j];
                        tv[i * c + j] * l - softplus(l)
                    })
                    .sum()
            })
            .collect();
        Ok(self.push(out, r, 1, Op::BernoulliLogLik { logits, target }))
    }

    /// First node (in recording order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Gradients of a scalar node with respect to every parameter in `store`.
    ///
    /// Parameters that were never bound to this graph, or that the loss does
    /// not reach, get zero tensors.
    pub fn grad(&self, loss: Var, store: &ParamStore) -> Result<BTreeMap<String, Tensor>, DiffError> {
        let raw = self.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, t) in store.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|v| raw[v.0].clone())
                .unwrap_or_else(|| vec![0.0; t.len()]);
            out.insert(name.clone(), Tensor::new(t.shape().to_vec(), g)?);
        }
        Ok(out)
    }

    /// Gradient of a scalar node with respect to an arbitrary node.
    pub fn grad_wrt(&self, loss: Var, wrt: Var) -> Result<Vec<f64>, DiffError> {
        let raw = self.backward(loss)?;
        Ok(raw[wrt.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.node(wrt).value.len()]))
    }

    fn backward(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>, DiffError> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(DiffError::NonScalarLoss { rows: r, cols: c });
        }
        if let Some((idx, op)) = self.nodes[..=loss.0]
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
        {
            return Err(DiffError::NonFinite { node: idx, op });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(grads)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.cols(*b);
                let da = matmul_bt_raw(g, self.value(*b), m, n, k);
                let db = matmul_at_raw(self.value(*a), g, m, k, n);
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.rows(*b);
                let da = matmul_raw(g, self.value(*b), m, n, k);
                let db = matmul_at_raw(g, self.value(*a), m, n, k);
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::BatchMatVec { a, x, p, q } => {
                let (p, q) = (*p, *q);
                let av = self.value(*a);
                let xv = self.value(*x);
                let rows = self.rows(*x);
                let mut da = vec![0.0; av.len()];
                let mut dx = vec![0.0; xv.len()];
                for r in 0..rows {
                    for i in 0..p {
                        let go = g[r * p + i];
                        for j in 0..q {
                            da[r * p * q + i * q + j] = go * xv[r * q + j];
                            dx[r * q + j] += go * av[r * p * q + i * q + j];
                        }
                    }
                }
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[x.0], dx);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.to_vec());
                accumulate(&mut grads[b.0], g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g.to_vec());
                accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                let db = g.iter().zip(av).map(|(g, a)| g * a).collect();
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::Div(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = g.iter().zip(bv).map(|(g, b)| g / b).collect();
                let db = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::AddRow(a, row) => {
                let d = node.cols;
                let mut dr = vec![0.0; d];
                for chunk in g.chunks(d) {
                    for (o, v) in dr.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                accumulate(&mut grads[a.0], g.to_vec());
                accumulate(&mut grads[row.0], dr);
            }
            Op::Scale(a, s) => accumulate(&mut grads[a.0], g.iter().map(|v| v * s).collect()),
            Op::Offset(a) => accumulate(&mut grads[a.0], g.to_vec()),
            Op::Relu(a) => {
                let av = self.value(*a);
                let da = g.iter().zip(av).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                accumulate(&mut grads[a.0], da);
            }
            Op::Tanh(a) => {
                let da = g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                accumulate(&mut grads[a.0], da);
            }
            Op::Sigmoid(a) => {
                let da = g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                accumulate(&mut grads[a.0], da);
            }
            Op::Exp(a) => {
                let da = g.iter().zip(y).map(|(g, e)| g * e).collect();
                accumulate(&mut grads[a.0], da);
            }
            Op::Log(a) => {
                let av = self.value(*a);
                let da = g.iter().zip(av).map(|(g, x)| g / x).collect();
                accumulate(&mut grads[a.0], da);
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                let da = g.iter().zip(av).map(|(g, x)| g * sigmoid(*x)).collect();
                accumulate(&mut grads[a.0], da);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let da = g
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v < *lo || *v > *hi { 0.0 } else { *g })
                    .collect();
                accumulate(&mut grads[x.0], da);
            }
            Op::SoftmaxRows(a) => {
                let c = node.cols;
                let mut da = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    da.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::ConcatCols(parts) => {
                let total = node.cols;
                let mut offset = 0;
                for p in parts {
                    let c = self.cols(*p);
                    let mut dp = Vec::with_capacity(node.rows * c);
                    for row in g.chunks(total) {
                        dp.extend_from_slice(&row[offset..offset + c]);
                    }
                    accumulate(&mut grads[p.0], dp);
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let w = node.cols;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.shape(*x);
                let mut dx = vec![0.0; r * c];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(&mut grads[x.0], dx);
            }
            Op::RepeatRows { x, n } => {
                let (r, c) = self.shape(*x);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..*n {
                        let src = &g[(i * n + j) * c..(i * n + j + 1) * c];
                        for (o, v) in dx[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::GroupMeanRows { x, n } => {
                let (r, c) = self.shape(*x);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let grp = i / n;
                    for j in 0..c {
                        dx[i * c + j] = g[grp * c + j] / *n as f64;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut da = Vec::with_capacity(r * c);
                for &gv in g.iter().take(r) {
                    da.extend(std::iter::repeat(gv).take(c));
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::Reshape(a) => accumulate(&mut grads[a.0], g.to_vec()),
            Op::Gru(cache) => self.gru_backward(cache, g, grads),
            Op::ConcreteLogDensity { x, logits, lambda } => {
                let k = self.cols(*x);
                let xv = self.value(*x);
                let lv = self.value(*logits);
                let mut dx = vec![0.0; xv.len()];
                let mut dl = vec![0.0; lv.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let (_, gx, gl) = concrete_row(&xv[i * k..(i + 1) * k], &lv[i * k..(i + 1) * k], *lambda);
                    for j in 0..k {
                        dx[i * k + j] = gi * gx[j];
                        dl[i * k + j] = gi * gl[j];
                    }
                }
                accumulate(&mut grads[x.0], dx);
                accumulate(&mut grads[logits.0], dl);
            }
            Op::BinaryConcreteLogDensity { x, logits, lambda } => {
                let k = self.cols(*x);
                let xv = self.value(*x);
                let lv = self.value(*logits);
                let mut dx = vec![0.0; xv.len()];
                let mut dl = vec![0.0; lv.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let (_, gx, gl) =
                        binary_concrete_row(&xv[i * k..(i + 1) * k], &lv[i * k..(i + 1) * k], *lambda);
                    for j in 0..k {
                        dx[i * k + j] = gi * gx[j];
                        dl[i * k + j] = gi * gl[j];
                    }
                }
                accumulate(&mut grads[x.0], dx);
                accumulate(&mut grads[logits.0], dl);
            }
            Op::GatedLogitMix { a, b, gate } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let gv = self.value(*gate);
                let mut da = vec![0.0; g.len()];
                let mut db = vec![0.0; g.len()];
                let mut dg = vec![0.0; g.len()];
                for i in 0..g.len() {
                    let out = y[i];
                    let wa = gv[i] * (av[i] - out).exp();
                    let wb = (1.0 - gv[i]) * (bv[i] - out).exp();
                    da[i] = g[i] * wa;
                    db[i] = g[i] * wb;
                    dg[i] = g[i] * ((av[i] - out).exp() - (bv[i] - out).exp());
                }
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
                accumulate(&mut grads[gate.0], dg);
            }
            Op::BernoulliLogLik { logits, target } => {
                let (r, c) = self.shape(*logits);
                let lv = self.value(*logits);
                let tv = self.value(*target);
                let mut dl = vec![0.0; r * c];
                let mut dt = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let idx = i * c + j;
                        dl[idx] = g[i] * (tv[idx] - sigmoid(lv[idx]));
                        dt[idx] = g[i] * lv[idx];
                    }
                }
                accumulate(&mut grads[logits.0], dl);
                accumulate(&mut grads[target.0], dt);
            }
        }
    }

    fn gru_backward(&self, c: &GruCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, dx) = self.shape(c.x);
        let dh = self.cols(c.h);
        let hv = self.value(c.h);
        let mut dgi = vec![0.0; n * 3 * dh];
        let mut dgh = vec![0.0; n * 3 * dh];
        let mut dh_prev = vec![0.0; n * dh];
        for row in 0..n {
            let base = row * 3 * dh;
            for j in 0..dh {
                let idx = row * dh + j;
                let (r, z, nn) = (c.r[idx], c.z[idx], c.n[idx]);
                let gout = g[idx];
                let dn = gout * (1.0 - z);
                let dz = gout * (hv[idx] - nn);
                dh_prev[idx] = gout * z;
                let dn_pre = dn * (1.0 - nn * nn);
                let dr = dn_pre * c.gh_n[idx];
                let dr_pre = dr * r * (1.0 - r);
                let dz_pre = dz * z * (1.0 - z);
                dgi[base + j] = dr_pre;
                dgi[base + dh + j] = dz_pre;
                dgi[base + 2 * dh + j] = dn_pre;
                dgh[base + j] = dr_pre;
                dgh[base + dh + j] = dz_pre;
                dgh[base + 2 * dh + j] = dn_pre * r;
            }
        }
        let dxv = matmul_bt_raw(&dgi, self.value(c.w_ih), n, 3 * dh, dx);
        let dw_ih = matmul_at_raw(self.value(c.x), &dgi, n, dx, 3 * dh);
        let dh_rec = matmul_bt_raw(&dgh, self.value(c.w_hh), n, 3 * dh, dh);
        let dw_hh = matmul_at_raw(hv, &dgh, n, dh, 3 * dh);
        let mut db_ih = vec![0.0; 3 * dh];
        let mut db_hh = vec![0.0; 3 * dh];
        for row in 0..n {
            for j in 0..3 * dh {
                db_ih[j] += dgi[row * 3 * dh + j];
                db_hh[j] += dgh[row * 3 * dh + j];
            }
        }
        for (a, b) in dh_prev.iter_mut().zip(dh_rec) {
            *a += b;
        }
        accumulate(&mut grads[c.x.0], dxv);
        accumulate(&mut grads[c.h.0], dh_prev);
        accumulate(&mut grads[c.w_ih.0], dw_ih);
        accumulate(&mut grads[c.w_hh.0], dw_hh);
        accumulate(&mut grads[c.b_ih.0], db_ih);
        accumulate(&mut grads[c.b_hh.0], db_hh);
    }
}
