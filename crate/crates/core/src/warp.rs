//! Rotation parameterizations, per-point warp functions and the level
//! composition rule.
//!
//! Batch functions work on tape columns so that every step stays
//! differentiable. The scalar helpers ([`exp_so3`], [`rotation_from_repr`],
//! [`warp_point`]) evaluate the same batch code on a one-row tape.
//!
//! Network outputs are interpreted as offsets from the identity parameters of
//! the chosen representation, so a zero network yields the identity warp for
//! every representation. Layout of a motion row: `[log_scale]` (Sim(3) only),
//! then the rotation parameters (SE(3) and Sim(3)), then the translation.

use crate::autodiff::{self, Tape, Tensor, Var};
use crate::types::{Point3, RotationRepr, WarpFieldType};

pub type Matrix3 = [[f64; 3]; 3];

/// Added under square roots of normalization denominators.
const NORM_FLOOR_SQ: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WarpError {
    #[error("{repr} expects {expected} parameters, got {actual}")]
    ParamCount {
        repr: RotationRepr,
        expected: usize,
        actual: usize,
    },
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("6D rotation vectors are zero or colinear")]
    DegenerateSixD,
    #[error(transparent)]
    Tape(#[from] autodiff::AutodiffError),
}

type Col3 = [Var; 3];

fn add3(t: &mut Tape, a: Col3, b: Col3) -> autodiff::Result<Col3> {
    Ok([t.add(a[0], b[0])?, t.add(a[1], b[1])?, t.add(a[2], b[2])?])
}

fn sub3(t: &mut Tape, a: Col3, b: Col3) -> autodiff::Result<Col3> {
    Ok([t.sub(a[0], b[0])?, t.sub(a[1], b[1])?, t.sub(a[2], b[2])?])
}

fn scale3(t: &mut Tape, a: Col3, s: Var) -> autodiff::Result<Col3> {
    Ok([t.mul(a[0], s)?, t.mul(a[1], s)?, t.mul(a[2], s)?])
}

fn dot3(t: &mut Tape, a: Col3, b: Col3) -> autodiff::Result<Var> {
    let x = t.mul(a[0], b[0])?;
    let y = t.mul(a[1], b[1])?;
    let z = t.mul(a[2], b[2])?;
    let xy = t.add(x, y)?;
    t.add(xy, z)
}

fn cross3(t: &mut Tape, a: Col3, b: Col3) -> autodiff::Result<Col3> {
    let mut comp = |i: usize, j: usize| -> autodiff::Result<Var> {
        let l = t.mul(a[i], b[j])?;
        let r = t.mul(a[j], b[i])?;
        t.sub(l, r)
    };
    Ok([comp(1, 2)?, comp(2, 0)?, comp(0, 1)?])
}

fn normalize3(t: &mut Tape, a: Col3) -> autodiff::Result<Col3> {
    let sq = dot3(t, a, a)?;
    let sq = t.add_scalar(sq, NORM_FLOOR_SQ)?;
    let n = t.sqrt(sq)?;
    Ok([t.div(a[0], n)?, t.div(a[1], n)?, t.div(a[2], n)?])
}

/// `1 - 2 (a^2 + b^2)`.
fn one_minus_twice_sum_sq(t: &mut Tape, a: Var, b: Var) -> autodiff::Result<Var> {
    let aa = t.mul(a, a)?;
    let bb = t.mul(b, b)?;
    let s = t.add(aa, bb)?;
    let s = t.mul_scalar(s, -2.0)?;
    t.add_scalar(s, 1.0)
}

/// `2 (a b + sign c d)`.
fn twice_pair(t: &mut Tape, a: Var, b: Var, c: Var, d: Var, sign: f64) -> autodiff::Result<Var> {
    let ab = t.mul(a, b)?;
    let cd = t.mul(c, d)?;
    let cd = t.mul_scalar(cd, sign)?;
    let s = t.add(ab, cd)?;
    t.mul_scalar(s, 2.0)
}

/// Per-point rotation matrices (as 3 x 3 grids of n x 1 columns) from
/// representation parameters given as columns.
pub fn rotation_columns(
    t: &mut Tape,
    repr: RotationRepr,
    params: &[Var],
) -> autodiff::Result<[[Var; 3]; 3]> {
    assert_eq!(params.len(), repr.param_count(), "rotation parameter count");
    match repr {
        RotationRepr::AxisAngle => {
            // R = I + A K + B K^2, K^2 = w w^T - |w|^2 I.
            let w = [params[0], params[1], params[2]];
            let u = dot3(t, w, w)?;
            let a = t.sin_over_root(u)?;
            let b = t.versine_over_square(u)?;
            let bu = t.mul(b, u)?;
            let bu = t.neg(bu)?;
            let diag = t.add_scalar(bu, 1.0)?;
            let aw = scale3(t, w, a)?;
            let bw = scale3(t, w, b)?;
            let mut r = [[w[0]; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    let outer = t.mul(bw[i], w[j])?;
                    r[i][j] = if i == j {
                        t.add(diag, outer)?
                    } else {
                        // K[i][j] = -eps_ijk w_k.
                        let k = 3 - i - j;
                        let positive = (i + 1) % 3 == j;
                        if positive {
                            t.sub(outer, aw[k])?
                        } else {
                            t.add(outer, aw[k])?
                        }
                    };
                }
            }
            Ok(r)
        }
        RotationRepr::EulerXyz => {
            // Rz(c) Ry(b) Rx(a).
            let (sa, ca) = (t.sin(params[0])?, t.cos(params[0])?);
            let (sb, cb) = (t.sin(params[1])?, t.cos(params[1])?);
            let (sc, cc) = (t.sin(params[2])?, t.cos(params[2])?);
            let cc_cb = t.mul(cc, cb)?;
            let sc_cb = t.mul(sc, cb)?;
            let cc_sb = t.mul(cc, sb)?;
            let sc_sb = t.mul(sc, sb)?;
            let r00 = cc_cb;
            let r01 = {
                let p = t.mul(cc_sb, sa)?;
                let q = t.mul(sc, ca)?;
                t.sub(p, q)?
            };
            let r02 = {
                let p = t.mul(cc_sb, ca)?;
                let q = t.mul(sc, sa)?;
                t.add(p, q)?
            };
            let r10 = sc_cb;
            let r11 = {
                let p = t.mul(sc_sb, sa)?;
                let q = t.mul(cc, ca)?;
                t.add(p, q)?
            };
            let r12 = {
                let p = t.mul(sc_sb, ca)?;
                let q = t.mul(cc, sa)?;
                t.sub(p, q)?
            };
            let r20 = t.neg(sb)?;
            let r21 = t.mul(cb, sa)?;
            let r22 = t.mul(cb, ca)?;
            Ok([[r00, r01, r02], [r10, r11, r12], [r20, r21, r22]])
        }
        RotationRepr::Quaternion => {
            let q = [params[0], params[1], params[2], params[3]];
            let sq = {
                let ww = t.mul(q[0], q[0])?;
                let v = dot3(t, [q[1], q[2], q[3]], [q[1], q[2], q[3]])?;
                t.add(ww, v)?
            };
            let sq = t.add_scalar(sq, NORM_FLOOR_SQ)?;
            let n = t.sqrt(sq)?;
            let (w, x, y, z) = (
                t.div(q[0], n)?,
                t.div(q[1], n)?,
                t.div(q[2], n)?,
                t.div(q[3], n)?,
            );
            Ok([
                [
                    one_minus_twice_sum_sq(t, y, z)?,
                    twice_pair(t, x, y, w, z, -1.0)?,
                    twice_pair(t, x, z, w, y, 1.0)?,
                ],
                [
                    twice_pair(t, x, y, w, z, 1.0)?,
                    one_minus_twice_sum_sq(t, x, z)?,
                    twice_pair(t, y, z, w, x, -1.0)?,
                ],
                [
                    twice_pair(t, x, z, w, y, -1.0)?,
                    twice_pair(t, y, z, w, x, 1.0)?,
                    one_minus_twice_sum_sq(t, x, y)?,
                ],
            ])
        }
        RotationRepr::SixD => {
            // Gram-Schmidt on two 3-vectors; they become the first two columns.
            let a1 = [params[0], params[1], params[2]];
            let a2 = [params[3], params[4], params[5]];
            let b1 = normalize3(t, a1)?;
            let proj = dot3(t, b1, a2)?;
            let along = scale3(t, b1, proj)?;
            let perp = sub3(t, a2, along)?;
            let b2 = normalize3(t, perp)?;
            let b3 = cross3(t, b1, b2)?;
            Ok([
                [b1[0], b2[0], b3[0]],
                [b1[1], b2[1], b3[1]],
                [b1[2], b2[2], b3[2]],
            ])
        }
    }
}

fn apply_rotation(t: &mut Tape, r: &[[Var; 3]; 3], p: Col3) -> autodiff::Result<Col3> {
    let mut out = p;
    for (i, row) in r.iter().enumerate() {
        out[i] = dot3(t, *row, p)?;
    }
    Ok(out)
}

fn columns(t: &mut Tape, m: Var) -> autodiff::Result<Vec<Var>> {
    let n = t.value(m).cols();
    (0..n).map(|c| t.column(m, c)).collect()
}

/// Applies the per-point warp `W(x, xi)` to an n x 3 batch, with `xi` the
/// n x D motion rows described in the module docs.
pub fn warp_batch(
    t: &mut Tape,
    points: Var,
    xi: Var,
    warp: WarpFieldType,
    repr: RotationRepr,
) -> autodiff::Result<Var> {
    let dim = warp.param_dim(repr);
    let got = t.value(xi).cols();
    if got != dim {
        return Err(autodiff::AutodiffError::ShapeMismatch {
            op: autodiff::OpKind::Slice,
            lhs: (t.value(points).rows(), dim),
            rhs: t.value(xi).shape(),
        });
    }
    let p = columns(t, points)?;
    let p: Col3 = [p[0], p[1], p[2]];
    let x = columns(t, xi)?;
    let tr: Col3 = [x[dim - 3], x[dim - 2], x[dim - 1]];
    let moved = match warp {
        WarpFieldType::Vector => add3(t, p, tr)?,
        WarpFieldType::Se3 | WarpFieldType::Sim3 => {
            let offset = usize::from(warp == WarpFieldType::Sim3);
            let ident = repr.identity_params();
            let rot_params = (0..repr.param_count())
                .map(|i| {
                    let raw = x[offset + i];
                    if ident[i] != 0.0 {
                        t.add_scalar(raw, ident[i])
                    } else {
                        Ok(raw)
                    }
                })
                .collect::<autodiff::Result<Vec<_>>>()?;
            let r = rotation_columns(t, repr, &rot_params)?;
            let mut rp = apply_rotation(t, &r, p)?;
            if warp == WarpFieldType::Sim3 {
                let s = t.exp(x[0])?;
                rp = scale3(t, rp, s)?;
            }
            add3(t, rp, tr)?
        }
    };
    t.concat(&moved)
}

/// Level composition `x + alpha (W(x, xi) - x)`: a blend between the
/// unchanged point (`alpha = 0`) and the fully warped one (`alpha = 1`).
pub fn compose_level(
    t: &mut Tape,
    x_prev: Var,
    xi: Var,
    alpha: Var,
    warp: WarpFieldType,
    repr: RotationRepr,
) -> autodiff::Result<Var> {
    let (n, c) = t.value(x_prev).shape();
    if c != 3 || t.value(alpha).shape() != (n, 1) || t.value(xi).rows() != n {
        return Err(autodiff::AutodiffError::ShapeMismatch {
            op: autodiff::OpKind::Mul,
            lhs: t.value(x_prev).shape(),
            rhs: t.value(alpha).shape(),
        });
    }
    let warped = warp_batch(t, x_prev, xi, warp, repr)?;
    let w = columns(t, warped)?;
    let p = columns(t, x_prev)?;
    let mut out = [p[0]; 3];
    for i in 0..3 {
        let d = t.sub(w[i], p[i])?;
        let d = t.mul(d, alpha)?;
        out[i] = t.add(p[i], d)?;
    }
    t.concat(&out)
}

/// Rotation matrices for n parameter rows (n x param_count).
pub fn rotation_matrices(repr: RotationRepr, params: &Tensor) -> Result<Vec<Matrix3>, WarpError> {
    if params.cols() != repr.param_count() {
        return Err(WarpError::ParamCount {
            repr,
            expected: repr.param_count(),
            actual: params.cols(),
        });
    }
    let mut t = Tape::new();
    let p = t.constant(params.clone())?;
    let cols = columns(&mut t, p)?;
    let r = rotation_columns(&mut t, repr, &cols)?;
    let n = params.rows();
    Ok((0..n)
        .map(|row| {
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] = t.value(r[i][j]).data()[row];
                }
            }
            m
        })
        .collect())
}

/// Rodrigues exponential map of an axis-angle vector.
pub fn exp_so3(omega: Point3) -> Matrix3 {
    let p = Tensor::new(1, 3, omega.to_vec());
    rotation_matrices(RotationRepr::AxisAngle, &p).expect("axis-angle has 3 parameters")[0]
}

/// Rotation matrix from raw representation parameters.
pub fn rotation_from_repr(repr: RotationRepr, params: &[f64]) -> Result<Matrix3, WarpError> {
    if params.len() != repr.param_count() {
        return Err(WarpError::ParamCount {
            repr,
            expected: repr.param_count(),
            actual: params.len(),
        });
    }
    match repr {
        RotationRepr::Quaternion => {
            if params.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
                return Err(WarpError::ZeroQuaternion);
            }
        }
        RotationRepr::SixD => {
            let a: Point3 = [params[0], params[1], params[2]];
            let b: Point3 = [params[3], params[4], params[5]];
            let na = crate::types::norm(a);
            let nb = crate::types::norm(b);
            let c = crate::types::norm(crate::types::cross(a, b));
            if na < 1e-12 || nb < 1e-12 || c <= 1e-12 * na * nb {
                return Err(WarpError::DegenerateSixD);
            }
        }
        _ => {}
    }
    Ok(rotation_matrices(repr, &Tensor::new(1, params.len(), params.to_vec()))?[0])
}

pub fn mat_vec(m: &Matrix3, v: Point3) -> Point3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Largest entry of `|R^T R - I|`.
pub fn orthonormality_error(m: &Matrix3) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

pub fn determinant(m: &Matrix3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Per-point motion parameters in their natural (not offset) form.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionParams {
    pub rotation: Vec<f64>,
    pub translation: Point3,
    /// Natural log of the Sim(3) scale.
    pub log_scale: f64,
}

impl MotionParams {
    pub fn identity(repr: RotationRepr) -> Self {
        Self {
            rotation: repr.identity_params().to_vec(),
            translation: [0.0; 3],
            log_scale: 0.0,
        }
    }

    /// Motion row in network layout (offsets from identity).
    pub fn to_row(&self, warp: WarpFieldType, repr: RotationRepr) -> Vec<f64> {
        let mut row = Vec::with_capacity(warp.param_dim(repr));
        if warp == WarpFieldType::Sim3 {
            row.push(self.log_scale);
        }
        if warp != WarpFieldType::Vector {
            row.extend(
                self.rotation
                    .iter()
                    .zip(repr.identity_params())
                    .map(|(v, i)| v - i),
            );
        }
        row.extend_from_slice(&self.translation);
        row
    }
}

/// `W(x, xi)` for a single point.
pub fn warp_point(
    x: Point3,
    xi: &MotionParams,
    warp: WarpFieldType,
    repr: RotationRepr,
) -> Result<Point3, WarpError> {
    if warp != WarpFieldType::Vector && xi.rotation.len() != repr.param_count() {
        return Err(WarpError::ParamCount {
            repr,
            expected: repr.param_count(),
            actual: xi.rotation.len(),
        });
    }
    let mut t = Tape::new();
    let p = t.constant(Tensor::new(1, 3, x.to_vec()))?;
    let m = t.constant(Tensor::new(1, warp.param_dim(repr), xi.to_row(warp, repr)))?;
    let out = warp_batch(&mut t, p, m, warp, repr)?;
    let v = t.value(out).data();
    Ok([v[0], v[1], v[2]])
}
