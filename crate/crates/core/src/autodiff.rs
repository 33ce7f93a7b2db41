//! Define-by-run reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every operation as a node holding its forward value and
//! the ids of its parents. Nodes are appended in evaluation order, so the tape
//! is topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! Every operation is described by an [`Op`] that knows how to evaluate itself
//! from its parent values and how to pull a cotangent back to its parents.
//! Keeping both rules next to each other lets [`Tape::audit`] check each
//! recorded node in isolation against finite differences, which is what
//! [`gradient_check`] uses to name the primitive responsible for a mismatch.
//!
//! Broadcasting is limited to scalar-with-tensor (`add_scalar`, `mul_scalar`)
//! plus the explicit bias row of [`Tape::linear`].

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Errors raised while recording or differentiating a graph.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: OpKind,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: OpKind },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: OpKind, reason: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length must equal rows * cols"
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(1, 1, vec![value])
    }

    /// Column vector (n x 1).
    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(n, 1, values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor::new(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// Writes `op(a) * op(b)` (m x n, row-major) to `out` without reading it.
#[allow(clippy::too_many_arguments)]
fn dgemm_into(
    m: usize,
    n: usize,
    k: usize,
    a: &Tensor,
    trans_a: bool,
    b: &Tensor,
    trans_b: bool,
    out: *mut f64,
) {
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: the strides describe in-bounds views of `a.data` and `b.data`,
    // and `out` has room for m * n values. beta = 0 means it is never read.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out,
            n as isize,
            1,
        );
    }
}

/// `c = op(a) * op(b)` where `op` optionally transposes. Shapes are given
/// after transposition: `op(a)` is m x k and `op(b)` is k x n.
fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Tensor {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let n = if trans_b { b.rows } else { b.cols };
    if m == 0 || n == 0 || k == 0 {
        return Tensor::zeros(m, n);
    }
    let mut data = Vec::with_capacity(m * n);
    dgemm_into(m, n, k, a, trans_a, b, trans_b, data.as_mut_ptr());
    // SAFETY: with beta = 0 every one of the m x n outputs has been written.
    unsafe { data.set_len(m * n) };
    Tensor::new(m, n, data)
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Discriminant of an [`Op`], used for error messages and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    Neg,
    MatMul,
    Linear,
    Sin,
    Cos,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Sqrt,
    Abs,
    Clamp,
    Sum,
    Mean,
    Concat,
    Slice,
    Gather,
    SinOverRoot,
    VersineOverSquare,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A recorded operation: parent ids plus any constant parameters.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    Neg(Var),
    MatMul(Var, Var),
    /// `x * w + 1 b` with `b` a single row.
    Linear(Var, Var, Var),
    Sin(Var),
    Cos(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    /// Column-wise concatenation.
    Concat(Vec<Var>),
    /// Column range `[start, end)`.
    Slice(Var, usize, usize),
    /// Row gather.
    Gather(Var, Vec<usize>),
    /// `sin(sqrt(u)) / sqrt(u)` evaluated on a squared angle `u`.
    SinOverRoot(Var),
    /// `(1 - cos(sqrt(u))) / u` evaluated on a squared angle `u`.
    VersineOverSquare(Var),
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Neg(..) => OpKind::Neg,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear(..) => OpKind::Linear,
            Op::Sin(..) => OpKind::Sin,
            Op::Cos(..) => OpKind::Cos,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Abs(..) => OpKind::Abs,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice(..) => OpKind::Slice,
            Op::Gather(..) => OpKind::Gather,
            Op::SinOverRoot(..) => OpKind::SinOverRoot,
            Op::VersineOverSquare(..) => OpKind::VersineOverSquare,
        }
    }

    pub fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Linear(x, w, b) => vec![*x, *w, *b],
            Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::Neg(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Slice(a, ..)
            | Op::Gather(a, _)
            | Op::SinOverRoot(a)
            | Op::VersineOverSquare(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }

    /// Forward rule: value of this op given its parents' values.
    fn eval(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let kind = self.kind();
        let same_shape = |a: &Tensor, b: &Tensor| -> Result<()> {
            if a.shape() == b.shape() {
                Ok(())
            } else {
                Err(AutodiffError::ShapeMismatch {
                    op: kind,
                    lhs: a.shape(),
                    rhs: b.shape(),
                })
            }
        };
        let out = match self {
            Op::Leaf | Op::Constant => unreachable!("leaves are not evaluated"),
            Op::Add(..) => {
                same_shape(inputs[0], inputs[1])?;
                inputs[0].zip(inputs[1], |a, b| a + b)
            }
            Op::Sub(..) => {
                same_shape(inputs[0], inputs[1])?;
                inputs[0].zip(inputs[1], |a, b| a - b)
            }
            Op::Mul(..) => {
                same_shape(inputs[0], inputs[1])?;
                inputs[0].zip(inputs[1], |a, b| a * b)
            }
            Op::Div(..) => {
                same_shape(inputs[0], inputs[1])?;
                inputs[0].zip(inputs[1], |a, b| a / b)
            }
            Op::AddScalar(_, c) => inputs[0].map(|a| a + c),
            Op::MulScalar(_, c) => inputs[0].map(|a| a * c),
            Op::Neg(_) => inputs[0].map(|a| -a),
            Op::MatMul(..) => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.cols != b.rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: kind,
                        lhs: a.shape(),
                        rhs: b.shape(),
                    });
                }
                gemm(a, false, b, false)
            }
            Op::Linear(..) => {
                let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
                if x.cols != w.rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: kind,
                        lhs: x.shape(),
                        rhs: w.shape(),
                    });
                }
                if b.rows != 1 || b.cols != w.cols {
                    return Err(AutodiffError::ShapeMismatch {
                        op: kind,
                        lhs: w.shape(),
                        rhs: b.shape(),
                    });
                }
                let mut out = gemm(x, false, w, false);
                for row in out.data.chunks_exact_mut(b.cols) {
                    for (o, bias) in row.iter_mut().zip(&b.data) {
                        *o += bias;
                    }
                }
                out
            }
            Op::Sin(_) => inputs[0].map(f64::sin),
            Op::Cos(_) => inputs[0].map(f64::cos),
            Op::Tanh(_) => inputs[0].map(f64::tanh),
            Op::Sigmoid(_) => inputs[0].map(sigmoid),
            Op::Relu(_) => inputs[0].map(|a| a.max(0.0)),
            Op::Exp(_) => inputs[0].map(f64::exp),
            Op::Log(_) => inputs[0].map(f64::ln),
            Op::Sqrt(_) => inputs[0].map(f64::sqrt),
            Op::Abs(_) => inputs[0].map(f64::abs),
            Op::Clamp(_, lo, hi) => inputs[0].map(|a| a.clamp(*lo, *hi)),
            Op::Sum(_) => Tensor::scalar(inputs[0].data.iter().sum()),
            Op::Mean(_) => {
                let t = inputs[0];
                if t.is_empty() {
                    return Err(AutodiffError::InvalidArgument {
                        op: kind,
                        reason: "mean of an empty tensor".into(),
                    });
                }
                Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64)
            }
            Op::Concat(_) => {
                let rows = inputs[0].rows;
                for t in inputs {
                    if t.rows != rows {
                        return Err(AutodiffError::ShapeMismatch {
                            op: kind,
                            lhs: inputs[0].shape(),
                            rhs: t.shape(),
                        });
                    }
                }
                let cols: usize = inputs.iter().map(|t| t.cols).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for t in inputs {
                        data.extend_from_slice(&t.data[r * t.cols..(r + 1) * t.cols]);
                    }
                }
                Tensor::new(rows, cols, data)
            }
            Op::Slice(_, start, end) => {
                let t = inputs[0];
                if start >= end || *end > t.cols {
                    return Err(AutodiffError::InvalidArgument {
                        op: kind,
                        reason: format!("column range {start}..{end} of {} columns", t.cols),
                    });
                }
                let width = end - start;
                let mut data = Vec::with_capacity(t.rows * width);
                for r in 0..t.rows {
                    data.extend_from_slice(&t.data[r * t.cols + start..r * t.cols + end]);
                }
                Tensor::new(t.rows, width, data)
            }
            Op::Gather(_, idx) => {
                let t = inputs[0];
                let mut data = Vec::with_capacity(idx.len() * t.cols);
                for &i in idx {
                    if i >= t.rows {
                        return Err(AutodiffError::InvalidArgument {
                            op: kind,
                            reason: format!("row {i} out of {} rows", t.rows),
                        });
                    }
                    data.extend_from_slice(&t.data[i * t.cols..(i + 1) * t.cols]);
                }
                Tensor::new(idx.len(), t.cols, data)
            }
            Op::SinOverRoot(_) => inputs[0].map(|u| sin_over_root(u).0),
            Op::VersineOverSquare(_) => inputs[0].map(|u| versine_over_square(u).0),
        };
        if out.is_finite() {
            Ok(out)
        } else {
            Err(AutodiffError::NonFinite { op: kind })
        }
    }

    /// Backward rule: cotangents for each parent given the output cotangent.
    fn vjp(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(..) => vec![g.clone(), g.clone()],
            Op::Sub(..) => vec![g.clone(), g.map(|v| -v)],
            Op::Mul(..) => vec![
                g.zip(inputs[1], |g, b| g * b),
                g.zip(inputs[0], |g, a| g * a),
            ],
            Op::Div(..) => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = g.zip(b, |g, b| g / b);
                let mut gb = g.zip(a, |g, a| -g * a);
                for (v, b) in gb.data.iter_mut().zip(&b.data) {
                    *v /= b * b;
                }
                vec![ga, gb]
            }
            Op::AddScalar(..) => vec![g.clone()],
            Op::MulScalar(_, c) => vec![g.map(|v| v * c)],
            Op::Neg(_) => vec![g.map(|v| -v)],
            Op::MatMul(..) => vec![
                gemm(g, false, inputs[1], true),
                gemm(inputs[0], true, g, false),
            ],
            Op::Linear(..) => {
                let (x, w) = (inputs[0], inputs[1]);
                let mut gb = Tensor::zeros(1, g.cols);
                for row in g.data.chunks_exact(g.cols.max(1)) {
                    for (acc, v) in gb.data.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![gemm(g, false, w, true), gemm(x, true, g, false), gb]
            }
            Op::Sin(_) => vec![g.zip(inputs[0], |g, a| g * a.cos())],
            Op::Cos(_) => vec![g.zip(inputs[0], |g, a| -g * a.sin())],
            Op::Tanh(_) => vec![g.zip(out, |g, y| g * (1.0 - y * y))],
            Op::Sigmoid(_) => vec![g.zip(out, |g, y| g * y * (1.0 - y))],
            Op::Relu(_) => vec![g.zip(inputs[0], |g, a| if a > 0.0 { g } else { 0.0 })],
            Op::Exp(_) => vec![g.zip(out, |g, y| g * y)],
            Op::Log(_) => vec![g.zip(inputs[0], |g, a| g / a)],
            // Subgradient 0 at the origin.
            Op::Sqrt(_) => vec![g.zip(out, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 })],
            // Subgradient 0 at the origin.
            Op::Abs(_) => vec![g.zip(inputs[0], |g, a| {
                if a > 0.0 {
                    g
                } else if a < 0.0 {
                    -g
                } else {
                    0.0
                }
            })],
            Op::Clamp(_, lo, hi) => {
                vec![g.zip(inputs[0], |g, a| if a >= *lo && a <= *hi { g } else { 0.0 })]
            }
            Op::Sum(_) => vec![Tensor::filled(inputs[0].rows, inputs[0].cols, g.item())],
            Op::Mean(_) => {
                let t = inputs[0];
                vec![Tensor::filled(t.rows, t.cols, g.item() / t.len() as f64)]
            }
            Op::Concat(_) => {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let mut part = Vec::with_capacity(t.len());
                        for r in 0..g.rows {
                            let row = &g.data[r * g.cols + offset..r * g.cols + offset + t.cols];
                            part.extend_from_slice(row);
                        }
                        offset += t.cols;
                        Tensor::new(t.rows, t.cols, part)
                    })
                    .collect()
            }
            Op::Slice(_, start, end) => {
                let t = inputs[0];
                let width = end - start;
                let mut ga = Tensor::zeros(t.rows, t.cols);
                for r in 0..t.rows {
                    ga.data[r * t.cols + start..r * t.cols + end]
                        .copy_from_slice(&g.data[r * width..(r + 1) * width]);
                }
                vec![ga]
            }
            Op::Gather(_, idx) => {
                let t = inputs[0];
                let mut ga = Tensor::zeros(t.rows, t.cols);
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..t.cols {
                        ga.data[i * t.cols + c] += g.data[k * t.cols + c];
                    }
                }
                vec![ga]
            }
            Op::SinOverRoot(_) => vec![g.zip(inputs[0], |g, u| g * sin_over_root(u).1)],
            Op::VersineOverSquare(_) => {
                vec![g.zip(inputs[0], |g, u| g * versine_over_square(u).1)]
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Squared-angle threshold below which the Rodrigues coefficients switch to
/// their Taylor expansions (angle below 1e-8).
const TAYLOR_VALUE_BELOW: f64 = 1e-16;
/// The derivative formulas cancel badly for small angles, so they switch to
/// series much earlier (angle below 1e-3).
const TAYLOR_DERIV_BELOW: f64 = 1e-6;

/// `(sin(t)/t, d/du)` with `u = t^2`.
pub(crate) fn sin_over_root(u: f64) -> (f64, f64) {
    let u = u.max(0.0);
    let value = if u < TAYLOR_VALUE_BELOW {
        1.0 - u / 6.0 + u * u / 120.0
    } else {
        let t = u.sqrt();
        t.sin() / t
    };
    let deriv = if u < TAYLOR_DERIV_BELOW {
        -1.0 / 6.0 + u / 60.0 - u * u / 1680.0
    } else {
        let t = u.sqrt();
        (t * t.cos() - t.sin()) / (2.0 * t * u)
    };
    (value, deriv)
}

/// `((1 - cos t)/t^2, d/du)` with `u = t^2`.
pub(crate) fn versine_over_square(u: f64) -> (f64, f64) {
    let u = u.max(0.0);
    let value = if u < TAYLOR_VALUE_BELOW {
        0.5 - u / 24.0 + u * u / 720.0
    } else {
        let t = u.sqrt();
        let h = (0.5 * t).sin();
        2.0 * h * h / u
    };
    let deriv = if u < TAYLOR_DERIV_BELOW {
        -1.0 / 24.0 + u / 360.0 - u * u / 13440.0
    } else {
        let t = u.sqrt();
        let h = (0.5 * t).sin();
        (t * t.sin() - 4.0 * h * h) / (2.0 * u * u)
    };
    (value, deriv)
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient buffers produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// influence the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

/// Outcome of auditing one recorded node against finite differences.
#[derive(Debug, Clone)]
pub struct OpAudit {
    pub node: usize,
    pub kind: OpKind,
    pub max_rel_error: f64,
}

/// Operation record for one forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
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

    /// Corrupts the backward rule of every node of `kind`. Used only to
    /// exercise the failure path of [`gradient_check`].
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.source(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.source(value, Op::Constant, false)
    }

    fn source(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.kind() });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn op(&self, var: Var) -> &Op {
        &self.nodes[var.0].op
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let parents = op.parents();
        let value = {
            let inputs: Vec<&Tensor> = parents.iter().map(|p| &self.nodes[p.0].value).collect();
            op.eval(&inputs)?
        };
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Neg(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// Affine map `x * w + b` with a 1 x out bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.record(Op::Linear(x, w, b))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Cos(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.record(Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: OpKind::Concat,
                reason: "nothing to concatenate".into(),
            });
        }
        self.record(Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.record(Op::Slice(a, start, end))
    }

    /// Single column `c` of `a`.
    pub fn column(&mut self, a: Var, c: usize) -> Result<Var> {
        self.slice(a, c, c + 1)
    }

    pub fn gather(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        self.record(Op::Gather(a, rows))
    }

    /// `sin(sqrt(u)) / sqrt(u)`, with a series expansion near zero.
    pub fn sin_over_root(&mut self, u: Var) -> Result<Var> {
        self.record(Op::SinOverRoot(u))
    }

    /// `(1 - cos(sqrt(u))) / u`, with a series expansion near zero.
    pub fn versine_over_square(&mut self, u: Var) -> Result<Var> {
        self.record(Op::VersineOverSquare(u))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.nodes[loss.0].value.shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let parents = node.op.parents();
            let inputs: Vec<&Tensor> = parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let mut pulled = node.op.vjp(&inputs, &node.value, &g);
            if self.fault == Some(node.op.kind()) {
                for t in &mut pulled {
                    for v in &mut t.data {
                        *v *= 1.5;
                    }
                }
            }
            for (parent, pg) in parents.iter().zip(pulled) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                if !pg.is_finite() {
                    return Err(AutodiffError::NonFinite { op: node.op.kind() });
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Checks every differentiable node's backward rule in isolation: a random
    /// output cotangent is pulled back and compared with central differences
    /// of the node's own forward rule, on at most `samples` entries per input.
    pub fn audit(&self, step: f64, samples: usize, seed: u64) -> Vec<OpAudit> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let parents = node.op.parents();
            let inputs: Vec<Tensor> = parents
                .iter()
                .map(|p| self.nodes[p.0].value.clone())
                .collect();
            let cot = Tensor::new(
                node.value.rows,
                node.value.cols,
                (0..node.value.len())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
            );
            let refs: Vec<&Tensor> = inputs.iter().collect();
            let mut pulled = node.op.vjp(&refs, &node.value, &cot);
            if self.fault == Some(node.op.kind()) {
                for t in &mut pulled {
                    for v in &mut t.data {
                        *v *= 1.5;
                    }
                }
            }
            let mut worst: f64 = 0.0;
            for (pi, parent) in parents.iter().enumerate() {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                let n = inputs[pi].len();
                let picks: Vec<usize> = if n <= samples {
                    (0..n).collect()
                } else {
                    (0..samples).map(|_| rng.gen_range(0..n)).collect()
                };
                for e in picks {
                    let probe = |delta: f64| -> Option<f64> {
                        let mut shifted = inputs.clone();
                        shifted[pi].data[e] += delta;
                        let refs: Vec<&Tensor> = shifted.iter().collect();
                        node.op.eval(&refs).ok().map(|v| v.dot(&cot))
                    };
                    let (Some(up), Some(down)) = (probe(step), probe(-step)) else {
                        continue;
                    };
                    let numeric = (up - down) / (2.0 * step);
                    let analytic = pulled[pi].data[e];
                    worst = worst.max(relative_error(analytic, numeric));
                }
            }
            out.push(OpAudit {
                node: id,
                kind: node.op.kind(),
                max_rel_error: worst,
            });
        }
        out
    }
}

/// `|a - b| / max(|a|, |b|, 1e-6)`: relative where the gradient is
/// meaningful, absolute for near-zero entries dominated by rounding.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// The entry with the largest disagreement in a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct Offender {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub passed: bool,
    pub checked: usize,
    pub worst: Option<Offender>,
    /// When the check fails, the recorded primitive whose local backward rule
    /// disagrees most with its forward rule.
    pub suspect: Option<OpKind>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }
}

/// Options for [`gradient_check_with`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen entries of each parameter.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

/// Compares the tape gradient of `f` against central finite differences on
/// every entry of every parameter.
pub fn gradient_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradient_check_with(
        f,
        params,
        &GradCheckOptions {
            step,
            tol,
            max_entries_per_param: None,
            seed: 0,
        },
    )
}

pub fn gradient_check_with<F>(
    f: F,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradient_check_on(Tape::new(), f, params, opts)
}

/// Same as [`gradient_check_with`], recording onto a caller-prepared tape
/// (for instance one with an injected fault).
pub fn gradient_check_on<F>(
    template: Tape,
    f: F,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = template;
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: Option<Offender> = None;
    let mut checked = 0;
    let mut shifted: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[pi]);
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < param.len() => {
                rand::seq::index::sample(&mut rng, param.len(), k).into_vec()
            }
            _ => (0..param.len()).collect(),
        };
        for e in entries {
            let original = param.data[e];
            shifted[pi].data[e] = original + opts.step;
            let up = evaluate(&shifted)?;
            shifted[pi].data[e] = original - opts.step;
            let down = evaluate(&shifted)?;
            shifted[pi].data[e] = original;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.data[e];
            let rel = relative_error(a, numeric);
            checked += 1;
            if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                worst = Some(Offender {
                    param: pi,
                    index: e,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    let passed = worst.as_ref().is_none_or(|w| w.rel_error < opts.tol);
    let suspect = if passed {
        None
    } else {
        tape.audit(opts.step, 8, opts.seed)
            .into_iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .map(|a| a.kind)
    };
    Ok(GradCheckReport {
        passed,
        checked,
        worst,
        suspect,
    })
}
