//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records matrix-valued operations as they are evaluated. Every
//! node keeps its forward value; [`Tape::gradient`] walks the record backwards
//! once and returns the adjoint of every node that (transitively) depends on a
//! differentiable leaf. Constants are leaves created with [`Tape::constant`];
//! nothing is propagated into them.
//!
//! Elementwise binary operations broadcast a `1×n`, `m×1` or `1×1` operand
//! against the other one.
//!
//! The linear-algebra nodes (Cholesky, triangular solve, RBF gram, cosine
//! feature sums) carry hand-written adjoints so that GP log densities can be
//! differentiated without scalarising the matrices.

use std::cell::RefCell;
use std::fmt;
use std::ops;

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::instrument;

pub type Mat = DMatrix<f64>;

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Silu,
    Cos,
    Sin,
    Square,
    Sqrt,
    Recip,
    Sech,
    /// Standard normal cumulative distribution function.
    NormCdf,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Cos => x.cos(),
            Unary::Sin => x.sin(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => 1.0 / x,
            Unary::Sech => 1.0 / x.cosh(),
            Unary::NormCdf => norm_cdf(x),
        }
    }

    /// dy/dx given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Cos => -x.sin(),
            Unary::Sin => x.cos(),
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Recip => -y * y,
            Unary::Sech => -y * x.tanh(),
            Unary::NormCdf => norm_pdf(x),
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

/// Φ(x) evaluated through `erfc` so that the lower tail keeps full precision.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// A bank of `K` cosine expansions sharing one input.
///
/// Column `k` of the output at row `x` is
/// `Σ_{j ∈ group k} weights[j] · cos(frequencies[j]·x + phases[j]) + offsets[k]`,
/// where groups are consecutive runs of `group_len` features.
#[derive(Debug, Clone)]
pub struct CosineBank {
    /// `(K·group_len) × D`
    pub frequencies: Mat,
    pub phases: Vec<f64>,
    pub weights: Vec<f64>,
    pub offsets: Vec<f64>,
    pub group_len: usize,
}

impl CosineBank {
    pub fn n_outputs(&self) -> usize {
        self.offsets.len()
    }

    fn arguments(&self, x: &Mat) -> Mat {
        let mut z = x * self.frequencies.transpose();
        for mut row in z.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(&self.phases) {
                *v += b;
            }
        }
        z
    }

    pub fn evaluate(&self, x: &Mat) -> Mat {
        let z = self.arguments(x);
        let k = self.n_outputs();
        let mut out = Mat::zeros(x.nrows(), k);
        for i in 0..x.nrows() {
            for g in 0..k {
                let mut acc = 0.0;
                for j in g * self.group_len..(g + 1) * self.group_len {
                    acc += self.weights[j] * z[(i, j)].cos();
                }
                out[(i, g)] = acc + self.offsets[g];
            }
        }
        out
    }

    fn input_adjoint(&self, x: &Mat, upstream: &Mat) -> Mat {
        let z = self.arguments(x);
        let mut scaled = Mat::zeros(z.nrows(), z.ncols());
        for i in 0..z.nrows() {
            for j in 0..z.ncols() {
                let g = upstream[(i, j / self.group_len)];
                scaled[(i, j)] = -g * self.weights[j] * z[(i, j)].sin();
            }
        }
        scaled * &self.frequencies
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Unary(usize, Unary),
    MaxConst(usize, f64),
    MinConst(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    ColSums(usize),
    RowSums(usize),
    Diag(usize),
    AddDiag(usize),
    Cholesky(usize),
    TriSolve(usize, usize),
    Rbf {
        a: usize,
        b: usize,
        inv_sq_lengthscales: Arc<Vec<f64>>,
    },
    Cosines(usize, Arc<CosineBank>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Slice {
        src: usize,
        row: usize,
        col: usize,
    },
    GatherRows(usize, Vec<usize>),
    SoftmaxRows(usize),
    LayerNormRows(usize, f64),
    LogSumExp(usize),
}

struct Node {
    value: Arc<Mat>,
    op: Op,
    tracked: bool,
}

/// Operation record for one differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.value();
        write!(f, "Var#{}({}x{})", self.id, v.nrows(), v.ncols())
    }
}

/// Adjoints produced by [`Tape::gradient`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Mat> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, zero-filled when absent.
    pub fn wrt_or_zero(&self, v: Var<'_>) -> Mat {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => {
                let val = v.value();
                Mat::zeros(val.nrows(), val.ncols())
            }
        }
    }
}

fn broadcast_shape(a: &Mat, b: &Mat) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!(
                "incompatible broadcast shapes {}x{} and {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )
        }
    };
    (dim(a.nrows(), b.nrows()), dim(a.ncols(), b.ncols()))
}

#[inline]
fn at(m: &Mat, i: usize, j: usize) -> f64 {
    let r = if m.nrows() == 1 { 0 } else { i };
    let c = if m.ncols() == 1 { 0 } else { j };
    m[(r, c)]
}

fn zip_broadcast(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let (r, c) = broadcast_shape(a, b);
    Mat::from_fn(r, c, |i, j| f(at(a, i, j), at(b, i, j)))
}

/// Sums a broadcast adjoint back down to `rows × cols`.
fn reduce_to(g: Mat, rows: usize, cols: usize) -> Mat {
    let mut g = g;
    if rows == 1 && g.nrows() != 1 {
        g = row_sums_of(&g);
    }
    if cols == 1 && g.ncols() != 1 {
        g = col_sums_of(&g);
    }
    g
}

/// Column totals as a `1×n` matrix.
fn row_sums_of(g: &Mat) -> Mat {
    Mat::from_fn(1, g.ncols(), |_, j| g.column(j).sum())
}

/// Row totals as an `m×1` matrix.
fn col_sums_of(g: &Mat) -> Mat {
    Mat::from_fn(g.nrows(), 1, |i, _| g.row(i).sum())
}

fn tril(m: &Mat) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| if j <= i { m[(i, j)] } else { 0.0 })
}

/// Lower-triangular Cholesky factor with the diagonal-jitter escalation used
/// throughout the crate (1e-10, growing ×10 up to 1e-4).
pub fn jittered_cholesky(a: &Mat) -> Option<(Mat, f64)> {
    instrument::note_factorization();
    let mut jitter = crate::gp::JITTER_START;
    while jitter <= crate::gp::JITTER_MAX * (1.0 + 1e-9) {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            return Some((ch.l(), jitter));
        }
        jitter *= 10.0;
    }
    None
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, tracked: bool) -> Var<'_> {
        self.push_shared(Arc::new(value), op, tracked)
    }

    fn push_shared(&self, value: Arc<Mat>, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Mat> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].tracked)
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf sharing storage with the caller.
    pub fn var_shared(&self, value: Arc<Mat>) -> Var<'_> {
        self.push_shared(value, Op::Leaf, true)
    }

    pub fn constant_shared(&self, value: Arc<Mat>) -> Var<'_> {
        self.push_shared(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Mat::from_element(1, 1, value))
    }

    fn node<'t>(&'t self, value: Mat, op: Op, inputs: &[usize]) -> Var<'t> {
        let tracked = self.tracked(inputs);
        self.push(value, op, tracked)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn gradient(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        assert!(
            lv.nrows() == 1 && lv.ncols() == 1,
            "gradient requires a 1x1 loss"
        );
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].tracked {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Mat::from_element(1, 1, 1.0));

        let acc = |grads: &mut Vec<Option<Mat>>, id: usize, g: Mat| {
            if !nodes[id].tracked {
                return;
            }
            match &mut grads[id] {
                Some(existing) => *existing += g,
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if nodes[*a].tracked {
                        acc(&mut grads, *a, reduce_to(g.clone(), va.nrows(), va.ncols()));
                    }
                    if nodes[*b].tracked {
                        acc(&mut grads, *b, reduce_to(&g * sign, vb.nrows(), vb.ncols()));
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].tracked {
                        let ga = zip_broadcast(&g, vb, |x, y| x * y);
                        acc(&mut grads, *a, reduce_to(ga, va.nrows(), va.ncols()));
                    }
                    if nodes[*b].tracked {
                        let gb = zip_broadcast(&g, va, |x, y| x * y);
                        acc(&mut grads, *b, reduce_to(gb, vb.nrows(), vb.ncols()));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].tracked {
                        let ga = zip_broadcast(&g, vb, |x, y| x / y);
                        acc(&mut grads, *a, reduce_to(ga, va.nrows(), va.ncols()));
                    }
                    if nodes[*b].tracked {
                        // d(a/b)/db = -out/b
                        let q = zip_broadcast(out, vb, |o, y| -o / y);
                        let gb = g.component_mul(&q);
                        acc(&mut grads, *b, reduce_to(gb, vb.nrows(), vb.ncols()));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::Shift(a) | Op::AddDiag(a) => acc(&mut grads, *a, g.clone()),
                Op::Unary(a, kind) => {
                    let x = &nodes[*a].value;
                    let mut ga = g.clone();
                    for ((gi, xi), yi) in ga.iter_mut().zip(x.iter()).zip(out.iter()) {
                        *gi *= kind.derivative(*xi, *yi);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaxConst(a, c) | Op::MinConst(a, c) => {
                    let x = &nodes[*a].value;
                    let is_max = matches!(node.op, Op::MaxConst(..));
                    let mut ga = g.clone();
                    for (gi, xi) in ga.iter_mut().zip(x.iter()) {
                        let pass = if is_max { *xi > *c } else { *xi < *c };
                        if !pass {
                            *gi = 0.0;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].tracked {
                        acc(&mut grads, *a, &g * vb.transpose());
                    }
                    if nodes[*b].tracked {
                        acc(&mut grads, *b, va.transpose() * &g);
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Sum(a) => {
                    let va = &nodes[*a].value;
                    acc(&mut grads, *a, Mat::from_element(va.nrows(), va.ncols(), g[(0, 0)]));
                }
                Op::ColSums(a) => {
                    let va = &nodes[*a].value;
                    acc(&mut grads, *a, Mat::from_fn(va.nrows(), va.ncols(), |_, j| g[(0, j)]));
                }
                Op::RowSums(a) => {
                    let va = &nodes[*a].value;
                    acc(&mut grads, *a, Mat::from_fn(va.nrows(), va.ncols(), |i, _| g[(i, 0)]));
                }
                Op::Diag(a) => {
                    let n = g.nrows();
                    acc(&mut grads, *a, Mat::from_fn(n, n, |i, j| if i == j { g[(i, 0)] } else { 0.0 }));
                }
                Op::Cholesky(a) => {
                    let l = out;
                    // P = Φ(Lᵀ L̄), Φ keeps the lower triangle with a halved diagonal.
                    let mut p = tril(&(l.transpose() * &g));
                    for i in 0..p.nrows() {
                        p[(i, i)] *= 0.5;
                    }
                    let x = l
                        .tr_solve_lower_triangular(&p)
                        .unwrap_or_else(|| Mat::from_element(p.nrows(), p.ncols(), f64::NAN));
                    let s = l
                        .tr_solve_lower_triangular(&x.transpose())
                        .unwrap_or_else(|| Mat::from_element(p.nrows(), p.ncols(), f64::NAN))
                        .transpose();
                    let sym = (&s + s.transpose()) * 0.5;
                    acc(&mut grads, *a, sym);
                }
                Op::TriSolve(l, b) => {
                    let lv = &nodes[*l].value;
                    let gb = lv
                        .tr_solve_lower_triangular(&g)
                        .unwrap_or_else(|| Mat::from_element(g.nrows(), g.ncols(), f64::NAN));
                    if nodes[*l].tracked {
                        let gl = tril(&(&gb * out.transpose())) * -1.0;
                        acc(&mut grads, *l, gl);
                    }
                    if nodes[*b].tracked {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Rbf {
                    a,
                    b,
                    inv_sq_lengthscales,
                } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let weighted = g.component_mul(out);
                    if nodes[*a].tracked {
                        let rs = col_sums_of(&weighted);
                        let gb_proj = &weighted * &**vb;
                        let ga = Mat::from_fn(va.nrows(), va.ncols(), |i, d| {
                            (gb_proj[(i, d)] - va[(i, d)] * rs[i]) * inv_sq_lengthscales[d]
                        });
                        acc(&mut grads, *a, ga);
                    }
                    if nodes[*b].tracked {
                        let cs = row_sums_of(&weighted);
                        let ga_proj = weighted.transpose() * &**va;
                        let gb = Mat::from_fn(vb.nrows(), vb.ncols(), |j, d| {
                            (ga_proj[(j, d)] - vb[(j, d)] * cs[j]) * inv_sq_lengthscales[d]
                        });
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Cosines(x, bank) => {
                    let vx = &nodes[*x].value;
                    acc(&mut grads, *x, bank.input_adjoint(vx, &g));
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let vp = &nodes[p].value;
                        if nodes[p].tracked {
                            acc(&mut grads, p, g.rows(r0, vp.nrows()).into_owned());
                        }
                        r0 += vp.nrows();
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let vp = &nodes[p].value;
                        if nodes[p].tracked {
                            acc(&mut grads, p, g.columns(c0, vp.ncols()).into_owned());
                        }
                        c0 += vp.ncols();
                    }
                }
                Op::Slice { src, row, col } => {
                    let vs = &nodes[*src].value;
                    let mut gs = Mat::zeros(vs.nrows(), vs.ncols());
                    gs.view_mut((*row, *col), (g.nrows(), g.ncols())).copy_from(&g);
                    acc(&mut grads, *src, gs);
                }
                Op::GatherRows(src, rows) => {
                    let vs = &nodes[*src].value;
                    let mut gs = Mat::zeros(vs.nrows(), vs.ncols());
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..vs.ncols() {
                            gs[(r, c)] += g[(i, c)];
                        }
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = Mat::zeros(out.nrows(), out.ncols());
                    for i in 0..out.nrows() {
                        let dot: f64 = (0..out.ncols()).map(|j| g[(i, j)] * out[(i, j)]).sum();
                        for j in 0..out.ncols() {
                            ga[(i, j)] = out[(i, j)] * (g[(i, j)] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = &nodes[*a].value;
                    let n = x.ncols() as f64;
                    let mut ga = Mat::zeros(x.nrows(), x.ncols());
                    for i in 0..x.nrows() {
                        let row = x.row(i);
                        let mean = row.sum() / n;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let gmean = g.row(i).sum() / n;
                        let gy: f64 = (0..x.ncols()).map(|j| g[(i, j)] * out[(i, j)]).sum::<f64>() / n;
                        for j in 0..x.ncols() {
                            ga[(i, j)] = inv_std * (g[(i, j)] - gmean - out[(i, j)] * gy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSumExp(a) => {
                    let x = &nodes[*a].value;
                    let lse = out[(0, 0)];
                    let ga = x.map(|v| g[(0, 0)] * (v - lse).exp());
                    acc(&mut grads, *a, ga);
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Mat> {
        self.tape.value_of(self.id)
    }

    /// Entry `(0, 0)`; the value of a `1×1` node.
    pub fn scalar(&self) -> f64 {
        self.value()[(0, 0)]
    }

    pub fn shape(&self) -> (usize, usize) {
        let v = self.value();
        (v.nrows(), v.ncols())
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(&[self.id])
    }

    fn binary(self, other: Var<'t>, op: fn(usize, usize) -> Op, f: fn(f64, f64) -> f64) -> Var<'t> {
        let value = zip_broadcast(&self.value(), &other.value(), f);
        self.tape.node(value, op(self.id, other.id), &[self.id, other.id])
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = &*self.value() * c;
        self.tape.node(value, Op::Scale(self.id, c), &[self.id])
    }

    /// Adds the constant `c` to every entry.
    pub fn shift(self, c: f64) -> Var<'t> {
        let value = self.value().map(|v| v + c);
        self.tape.node(value, Op::Shift(self.id), &[self.id])
    }

    pub fn unary(self, kind: Unary) -> Var<'t> {
        let value = self.value().map(|v| kind.apply(v));
        self.tape.node(value, Op::Unary(self.id, kind), &[self.id])
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }
    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Ln)
    }
    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }
    pub fn silu(self) -> Var<'t> {
        self.unary(Unary::Silu)
    }
    pub fn cos(self) -> Var<'t> {
        self.unary(Unary::Cos)
    }
    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }
    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }
    pub fn recip(self) -> Var<'t> {
        self.unary(Unary::Recip)
    }
    pub fn sech(self) -> Var<'t> {
        self.unary(Unary::Sech)
    }
    pub fn norm_cdf(self) -> Var<'t> {
        self.unary(Unary::NormCdf)
    }

    /// Elementwise `max(self, c)`; the adjoint is blocked where the clamp is active.
    pub fn max_const(self, c: f64) -> Var<'t> {
        let value = self.value().map(|v| v.max(c));
        self.tape.node(value, Op::MaxConst(self.id, c), &[self.id])
    }

    pub fn min_const(self, c: f64) -> Var<'t> {
        let value = self.value().map(|v| v.min(c));
        self.tape.node(value, Op::MinConst(self.id, c), &[self.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let value = &*self.value() * &*other.value();
        self.tape.node(value, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn t(self) -> Var<'t> {
        let value = self.value().transpose();
        self.tape.node(value, Op::Transpose(self.id), &[self.id])
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(self) -> Var<'t> {
        let value = Mat::from_element(1, 1, self.value().sum());
        self.tape.node(value, Op::Sum(self.id), &[self.id])
    }

    /// Sum over rows, `1×n`.
    pub fn col_sums(self) -> Var<'t> {
        let value = row_sums_of(&self.value());
        self.tape.node(value, Op::ColSums(self.id), &[self.id])
    }

    /// Sum over columns, `m×1`.
    pub fn row_sums(self) -> Var<'t> {
        let value = col_sums_of(&self.value());
        self.tape.node(value, Op::RowSums(self.id), &[self.id])
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(self) -> Var<'t> {
        let v = self.value();
        let value = Mat::from_fn(v.nrows(), 1, |i, _| v[(i, i)]);
        self.tape.node(value, Op::Diag(self.id), &[self.id])
    }

    /// `self + c·I`.
    pub fn add_diag(self, c: f64) -> Var<'t> {
        let mut value = (*self.value()).clone();
        for i in 0..value.nrows().min(value.ncols()) {
            value[(i, i)] += c;
        }
        self.tape.node(value, Op::AddDiag(self.id), &[self.id])
    }

    /// Lower Cholesky factor. Jitter is escalated on failure; if the matrix
    /// stays indefinite the factor is filled with NaN so the loss turns
    /// non-finite instead of panicking.
    pub fn cholesky(self) -> Var<'t> {
        let a = self.value();
        let value = match jittered_cholesky(&a) {
            Some((l, _)) => l,
            None => Mat::from_element(a.nrows(), a.ncols(), f64::NAN),
        };
        self.tape.node(value, Op::Cholesky(self.id), &[self.id])
    }

    /// `L⁻¹ b` where `self` is lower triangular.
    pub fn tri_solve(self, b: Var<'t>) -> Var<'t> {
        let l = self.value();
        let rhs = b.value();
        let value = l
            .solve_lower_triangular(&rhs)
            .unwrap_or_else(|| Mat::from_element(rhs.nrows(), rhs.ncols(), f64::NAN));
        self.tape.node(value, Op::TriSolve(self.id, b.id), &[self.id, b.id])
    }

    /// RBF cross-covariance between the rows of `self` and `other`.
    pub fn rbf(self, other: Var<'t>, variance: f64, lengthscales: &[f64]) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.ncols(), lengthscales.len());
        assert_eq!(b.ncols(), lengthscales.len());
        let inv: Vec<f64> = lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let value = Mat::from_fn(a.nrows(), b.nrows(), |i, j| {
            let mut s = 0.0;
            for (d, w) in inv.iter().enumerate() {
                let diff = a[(i, d)] - b[(j, d)];
                s += diff * diff * w;
            }
            variance * (-0.5 * s).exp()
        });
        self.tape.node(
            value,
            Op::Rbf {
                a: self.id,
                b: other.id,
                inv_sq_lengthscales: Arc::new(inv),
            },
            &[self.id, other.id],
        )
    }

    /// Evaluates a cosine bank at the rows of `self`.
    pub fn cosines(self, bank: &Arc<CosineBank>) -> Var<'t> {
        let value = bank.evaluate(&self.value());
        self.tape
            .node(value, Op::Cosines(self.id, Arc::clone(bank)), &[self.id])
    }

    pub fn slice(self, row: usize, col: usize, nrows: usize, ncols: usize) -> Var<'t> {
        let value = self.value().view((row, col), (nrows, ncols)).into_owned();
        self.tape.node(value, Op::Slice { src: self.id, row, col }, &[self.id])
    }

    pub fn row(self, i: usize) -> Var<'t> {
        let n = self.shape().1;
        self.slice(i, 0, 1, n)
    }

    pub fn gather_rows(self, rows: &[usize]) -> Var<'t> {
        let v = self.value();
        let value = Mat::from_fn(rows.len(), v.ncols(), |i, j| v[(rows[i], j)]);
        self.tape
            .node(value, Op::GatherRows(self.id, rows.to_vec()), &[self.id])
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let v = self.value();
        let mut value = (*v).clone();
        for mut row in value.row_iter_mut() {
            let m = row.max();
            row.apply(|x| *x = (*x - m).exp());
            let s = row.sum();
            row.apply(|x| *x /= s);
        }
        self.tape.node(value, Op::SoftmaxRows(self.id), &[self.id])
    }

    /// Row-wise standardisation without affine parameters.
    pub fn layer_norm_rows(self, eps: f64) -> Var<'t> {
        let v = self.value();
        let n = v.ncols() as f64;
        let mut value = (*v).clone();
        for mut row in value.row_iter_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.apply(|x| *x = (*x - mean) * inv);
        }
        self.tape.node(value, Op::LayerNormRows(self.id, eps), &[self.id])
    }

    /// `log Σ exp(entries)`, `1×1`.
    pub fn log_sum_exp(self) -> Var<'t> {
        let v = self.value();
        let m = v.max();
        let lse = if m.is_finite() {
            m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        } else {
            m
        };
        self.tape
            .node(Mat::from_element(1, 1, lse), Op::LogSumExp(self.id), &[self.id])
    }
}

pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let values: Vec<Arc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let cols = values[0].ncols();
    let rows: usize = values.iter().map(|v| v.nrows()).sum();
    let mut value = Mat::zeros(rows, cols);
    let mut r0 = 0;
    for v in &values {
        assert_eq!(v.ncols(), cols, "concat_rows column mismatch");
        value.view_mut((r0, 0), (v.nrows(), cols)).copy_from(v);
        r0 += v.nrows();
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.node(value, Op::ConcatRows(ids.clone()), &ids)
}

pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let values: Vec<Arc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let rows = values[0].nrows();
    let cols: usize = values.iter().map(|v| v.ncols()).sum();
    let mut value = Mat::zeros(rows, cols);
    let mut c0 = 0;
    for v in &values {
        assert_eq!(v.nrows(), rows, "concat_cols row mismatch");
        value.view_mut((0, c0), (rows, v.ncols())).copy_from(v);
        c0 += v.ncols();
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.node(value, Op::ConcatCols(ids.clone()), &ids)
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'t> ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.binary(rhs, Op::$variant, $f)
            }
        }
    };
}

impl_binop!(Add, add, Add, |a, b| a + b);
impl_binop!(Sub, sub, Sub, |a, b| a - b);
impl_binop!(Mul, mul, Mul, |a, b| a * b);
impl_binop!(Div, div, Div, |a, b| a / b);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }
}
