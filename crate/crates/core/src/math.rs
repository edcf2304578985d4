//! Small-matrix helpers shared by the forward and adjoint passes.
//!
//! Quaternions are stored as `[w, x, y, z]`. Every forward function that
//! participates in the differentiable path has a matching `*_backward`
//! that maps an output cotangent to input cotangents.

use nalgebra::{Matrix2, Matrix3, Vector3};

pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Returns `q / |q|`. A zero quaternion maps to identity.
pub fn quat_normalize(q: &Quat) -> Quat {
    let n = quat_norm(q);
    if n == 0.0 || !n.is_finite() {
        return IDENTITY_QUAT;
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn quat_normalize_backward(q: &Quat, d_out: &Quat) -> Quat {
    let n = quat_norm(q);
    if n == 0.0 || !n.is_finite() {
        return [0.0; 4];
    }
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let dot = u[0] * d_out[0] + u[1] * d_out[1] + u[2] * d_out[2] + u[3] * d_out[3];
    [
        (d_out[0] - u[0] * dot) / n,
        (d_out[1] - u[1] * dot) / n,
        (d_out[2] - u[2] * dot) / n,
        (d_out[3] - u[3] * dot) / n,
    ]
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Cotangents of `a ⊗ b` with respect to `a` and `b`.
pub fn quat_mul_backward(a: &Quat, b: &Quat, d: &Quat) -> (Quat, Quat) {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    let [dw, dx, dy, dz] = *d;
    let da = [
        dw * bw + dx * bx + dy * by + dz * bz,
        -dw * bx + dx * bw - dy * bz + dz * by,
        -dw * by + dx * bz + dy * bw - dz * bx,
        -dw * bz - dx * by + dy * bx + dz * bw,
    ];
    let db = [
        dw * aw + dx * ax + dy * ay + dz * az,
        -dw * ax + dx * aw + dy * az - dz * ay,
        -dw * ay - dx * az + dy * aw + dz * ax,
        -dw * az + dx * ay - dy * ax + dz * aw,
    ];
    (da, db)
}

// Below this angle the sin(θ/2)/θ factor and its derivative switch to
// Taylor series.
const SMALL_ANGLE: f64 = 1e-4;

/// Axis-angle vector to unit quaternion.
pub fn rotvec_to_quat(v: &Vector3<f64>) -> Quat {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let (c, s) = if theta < SMALL_ANGLE {
        // cos(θ/2), sin(θ/2)/θ
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
    } else {
        ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
    };
    [c, s * v.x, s * v.y, s * v.z]
}

pub fn rotvec_to_quat_backward(v: &Vector3<f64>, d: &Quat) -> Vector3<f64> {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    // q = (c(θ), s(θ) v). dc/dv = c'(θ) v/θ, d(s v)/dv = s I + s'(θ)/θ v vᵀ.
    // Both c'(θ)/θ and s'(θ)/θ stay finite as θ → 0.
    let (s, dc_over_theta, ds_over_theta) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 48.0, -0.25 + theta2 / 96.0, -1.0 / 24.0 + theta2 / 960.0)
    } else {
        let half = 0.5 * theta;
        let s = half.sin() / theta;
        let dc = -0.5 * half.sin();
        let ds = (0.5 * half.cos() * theta - half.sin()) / theta2;
        (s, dc / theta, ds / theta)
    };
    let dq_vec = Vector3::new(d[1], d[2], d[3]);
    let v_dot = v.dot(&dq_vec);
    d[0] * dc_over_theta * v + s * dq_vec + ds_over_theta * v_dot * v
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_rotmat(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn quat_to_rotmat_backward(q: &Quat, d: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let g = |r: usize, c: usize| d[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// `R diag(s²) Rᵀ`.
pub fn covariance_from(rot: &Matrix3<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let m = rot * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

/// Cotangents of [`covariance_from`] for a full (not necessarily symmetric)
/// upstream gradient `d_cov`.
pub fn covariance_from_backward(
    rot: &Matrix3<f64>,
    scale: &Vector3<f64>,
    d_cov: &Matrix3<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    let m = rot * Matrix3::from_diagonal(scale);
    let d_m = (d_cov + d_cov.transpose()) * m;
    let mut d_rot = Matrix3::zeros();
    let mut d_scale = Vector3::zeros();
    for j in 0..3 {
        for i in 0..3 {
            d_rot[(i, j)] = d_m[(i, j)] * scale[j];
            d_scale[j] += d_m[(i, j)] * rot[(i, j)];
        }
    }
    (d_rot, d_scale)
}

/// Inverse of a symmetric 2×2 matrix, `None` when `det <= 0`.
pub fn inverse_sym2(m: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let inv = 1.0 / det;
    Some(Matrix2::new(
        m[(1, 1)] * inv,
        -m[(0, 1)] * inv,
        -m[(1, 0)] * inv,
        m[(0, 0)] * inv,
    ))
}

/// Smallest eigenvalue of a symmetric 3×3 matrix.
pub fn min_eigenvalue(m: &Matrix3<f64>) -> f64 {
    m.symmetric_eigenvalues().min()
}
