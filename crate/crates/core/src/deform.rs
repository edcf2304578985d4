//! Per-Gaussian time deformation and its coefficient-modulated application.
//!
//! Each primitive carries polynomial coefficients for a mean offset, a
//! log-scale offset and a rotation-vector increment. The dynamic coefficient
//! `w` scales all three increments, so `w = 0` pins a primitive to its
//! canonical pose and `w = 1` applies the full deformation.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::math::{self, Quat};
use crate::scene::GaussianPrimitive;

pub const DEFAULT_DEGREE: usize = 2;

/// Polynomial deformation coefficients. Row `k` (0-based) multiplies
/// `t^(k+1)`; there is no constant term, so `t = 0` is the canonical pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformCoeffs {
    pub degree: usize,
    /// `degree × 3`, row-major.
    pub dmu: Vec<f64>,
    pub dlogs: Vec<f64>,
    pub drot: Vec<f64>,
}

impl DeformCoeffs {
    pub fn zeros(degree: usize) -> Self {
        let degree = degree.max(1);
        Self {
            degree,
            dmu: vec![0.0; 3 * degree],
            dlogs: vec![0.0; 3 * degree],
            drot: vec![0.0; 3 * degree],
        }
    }

    pub fn len(&self) -> usize {
        9 * self.degree
    }

    pub fn is_empty(&self) -> bool {
        self.degree == 0
    }

    pub fn is_consistent(&self) -> bool {
        self.degree >= 1
            && self.dmu.len() == 3 * self.degree
            && self.dlogs.len() == 3 * self.degree
            && self.drot.len() == 3 * self.degree
    }

    pub fn all_finite(&self) -> bool {
        self.dmu
            .iter()
            .chain(&self.dlogs)
            .chain(&self.drot)
            .all(|v| v.is_finite())
    }
}

/// Raw (unmodulated) increments at time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deltas {
    pub mean: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotvec: Vector3<f64>,
}

fn poly(rows: &[f64], t: f64) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    let mut tk = t;
    for row in rows.chunks_exact(3) {
        out += Vector3::new(row[0], row[1], row[2]) * tk;
        tk *= t;
    }
    out
}

fn poly_backward(rows_grad: &mut [f64], t: f64, d: &Vector3<f64>) {
    let mut tk = t;
    for row in rows_grad.chunks_exact_mut(3) {
        row[0] += d.x * tk;
        row[1] += d.y * tk;
        row[2] += d.z * tk;
        tk *= t;
    }
}

pub fn eval_deltas(coeffs: &DeformCoeffs, t: f64) -> Deltas {
    Deltas {
        mean: poly(&coeffs.dmu, t),
        log_scale: poly(&coeffs.dlogs, t),
        rotvec: poly(&coeffs.drot, t),
    }
}

/// How the dynamic coefficient enters the deformation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    /// `w = sigmoid(dyn_logit)` scales the increments.
    #[default]
    Coefficient,
    /// Increments applied in full; `dyn_logit` is disconnected.
    Unit,
}

/// A primitive evaluated at time `t`.
#[derive(Clone, Debug)]
pub struct DeformedGaussian {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: Quat,
    pub rotmat: Matrix3<f64>,
    pub covariance: Matrix3<f64>,
    /// Modulation factor actually applied.
    pub w: f64,
    deltas: Deltas,
    raw_rotation: Quat,
    increment: Quat,
    product: Quat,
}

pub fn deformed_params(prim: &GaussianPrimitive, t: f64, modulation: Modulation) -> DeformedGaussian {
    let w = match modulation {
        Modulation::Coefficient => prim.dyn_coeff(),
        Modulation::Unit => 1.0,
    };
    let deltas = eval_deltas(&prim.deform, t);
    let mean = Vector3::from(prim.mu0) + w * deltas.mean;
    let log_scale = Vector3::from(prim.log_scale) + w * deltas.log_scale;
    let scale = log_scale.map(f64::exp);
    let increment = math::rotvec_to_quat(&(w * deltas.rotvec));
    let product = math::quat_mul(&prim.rotation, &increment);
    let rotation = math::quat_normalize(&product);
    let rotmat = math::quat_to_rotmat(&rotation);
    let covariance = math::covariance_from(&rotmat, &scale);
    DeformedGaussian {
        mean,
        scale,
        rotation,
        rotmat,
        covariance,
        w,
        deltas,
        raw_rotation: prim.rotation,
        increment,
        product,
    }
}

/// Cotangents of the geometric parameters of one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryGrad {
    pub mu0: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Quat,
    pub dyn_logit: f64,
    pub deform: DeformCoeffs,
}

/// Adjoint of [`deformed_params`] for upstream cotangents on the deformed
/// mean and the (full, 9-entry) covariance.
pub fn deformed_params_backward(
    fwd: &DeformedGaussian,
    t: f64,
    modulation: Modulation,
    degree: usize,
    d_mean: &Vector3<f64>,
    d_cov: &Matrix3<f64>,
) -> GeometryGrad {
    let w = fwd.w;
    let (d_rotmat, d_scale) = math::covariance_from_backward(&fwd.rotmat, &fwd.scale, d_cov);
    let d_rotation = math::quat_to_rotmat_backward(&fwd.rotation, &d_rotmat);
    let d_product = math::quat_normalize_backward(&fwd.product, &d_rotation);
    let (d_raw, d_increment) = math::quat_mul_backward(&fwd.raw_rotation, &fwd.increment, &d_product);
    let d_rotvec_mod = math::rotvec_to_quat_backward(&(w * fwd.deltas.rotvec), &d_increment);
    let d_log_scale = d_scale.component_mul(&fwd.scale);

    let d_w = d_mean.dot(&fwd.deltas.mean)
        + d_log_scale.dot(&fwd.deltas.log_scale)
        + d_rotvec_mod.dot(&fwd.deltas.rotvec);
    let d_dyn_logit = match modulation {
        Modulation::Coefficient => d_w * w * (1.0 - w),
        Modulation::Unit => 0.0,
    };

    let mut deform = DeformCoeffs::zeros(degree);
    poly_backward(&mut deform.dmu, t, &(w * d_mean));
    poly_backward(&mut deform.dlogs, t, &(w * d_log_scale));
    poly_backward(&mut deform.drot, t, &(w * d_rotvec_mod));

    GeometryGrad {
        mu0: *d_mean,
        log_scale: d_log_scale,
        rotation: d_raw,
        dyn_logit: d_dyn_logit,
        deform,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logit;
    use approx::assert_relative_eq;

    fn prim_with(deform: DeformCoeffs, dyn_logit: f64) -> GaussianPrimitive {
        GaussianPrimitive {
            mu0: [0.1, -0.2, 0.3],
            log_scale: [-1.0, -0.5, -1.5],
            rotation: math::quat_normalize(&[0.9, 0.2, -0.3, 0.1]),
            color: [0.5, 0.5, 0.5],
            opacity_logit: 0.0,
            dyn_logit,
            deform,
        }
    }

    fn sample_coeffs() -> DeformCoeffs {
        DeformCoeffs {
            degree: 2,
            dmu: vec![0.4, -0.2, 0.1, 0.3, 0.5, -0.6],
            dlogs: vec![0.2, 0.1, -0.3, -0.1, 0.05, 0.2],
            drot: vec![0.3, -0.4, 0.2, 0.1, 0.2, 0.5],
        }
    }

    #[test]
    fn deltas_vanish_at_canonical_time() {
        let d = eval_deltas(&sample_coeffs(), 0.0);
        assert_eq!(d.mean, Vector3::zeros());
        assert_eq!(d.log_scale, Vector3::zeros());
        assert_eq!(d.rotvec, Vector3::zeros());
    }

    #[test]
    fn linear_and_quadratic_terms() {
        let mut c = DeformCoeffs::zeros(1);
        c.dmu[0] = 1.0;
        assert_eq!(eval_deltas(&c, 0.5).mean, Vector3::new(0.5, 0.0, 0.0));

        let mut c = DeformCoeffs::zeros(2);
        c.dmu[0] = 1.0;
        c.dmu[3] = 2.0;
        assert_relative_eq!(eval_deltas(&c, 0.5).mean.x, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn modulated_mean_example() {
        let mut c = DeformCoeffs::zeros(1);
        c.dmu[0] = 2.0;
        let mut p = prim_with(c, logit(0.25));
        p.mu0 = [0.0; 3];
        let d = deformed_params(&p, 1.0, Modulation::Coefficient);
        assert_relative_eq!(d.mean.x, 0.5, epsilon = 1e-12);
        assert_eq!(d.mean.y, 0.0);
    }

    #[test]
    fn static_and_dynamic_limits() {
        let c = sample_coeffs();
        let p = prim_with(c.clone(), -60.0);
        let canon = deformed_params(&p, 0.0, Modulation::Coefficient);
        for t in [0.25, 0.5, 1.0] {
            let d = deformed_params(&p, t, Modulation::Coefficient);
            assert_relative_eq!(d.mean, canon.mean, epsilon = 1e-12);
            assert_relative_eq!(d.covariance, canon.covariance, epsilon = 1e-12);
        }
        let p = prim_with(c.clone(), 60.0);
        let d = deformed_params(&p, 0.7, Modulation::Coefficient);
        let full = Vector3::from(p.mu0) + eval_deltas(&c, 0.7).mean;
        assert_relative_eq!(d.mean, full, epsilon = 1e-12);
        let unit = deformed_params(&prim_with(c, -3.0), 0.7, Modulation::Unit);
        assert_relative_eq!(unit.mean, full, epsilon = 1e-12);
    }

    #[test]
    fn canonical_time_ignores_w() {
        for z in [-4.0, 0.0, 2.5] {
            let p = prim_with(sample_coeffs(), z);
            let d = deformed_params(&p, 0.0, Modulation::Coefficient);
            assert_eq!(d.mean, Vector3::from(p.mu0));
            let r = math::quat_to_rotmat(&p.rotation);
            let s = Vector3::from(p.log_scale).map(f64::exp);
            assert_relative_eq!(d.covariance, math::covariance_from(&r, &s), epsilon = 1e-14);
        }
    }

    fn objective(p: &GaussianPrimitive, t: f64, wm: &Vector3<f64>, wc: &Matrix3<f64>) -> f64 {
        let d = deformed_params(p, t, Modulation::Coefficient);
        d.mean.dot(wm) + d.covariance.component_mul(wc).sum()
    }

    #[test]
    fn backward_matches_central_differences() {
        let p = prim_with(sample_coeffs(), 0.4);
        let t = 0.6;
        let wm = Vector3::new(0.7, -1.1, 0.4);
        let wc = Matrix3::new(0.3, -1.0, 0.5, 2.0, 0.1, -0.7, 0.9, 0.4, -0.2);
        let fwd = deformed_params(&p, t, Modulation::Coefficient);
        let g = deformed_params_backward(&fwd, t, Modulation::Coefficient, 2, &wm, &wc);

        let mut analytic = Vec::new();
        analytic.extend(g.mu0.iter());
        analytic.extend(g.log_scale.iter());
        analytic.extend(g.rotation.iter());
        analytic.push(g.dyn_logit);
        analytic.extend(&g.deform.dmu);
        analytic.extend(&g.deform.dlogs);
        analytic.extend(&g.deform.drot);

        let perturb = |p: &mut GaussianPrimitive, i: usize, h: f64| match i {
            0..=2 => p.mu0[i] += h,
            3..=5 => p.log_scale[i - 3] += h,
            6..=9 => p.rotation[i - 6] += h,
            10 => p.dyn_logit += h,
            11..=16 => p.deform.dmu[i - 11] += h,
            17..=22 => p.deform.dlogs[i - 17] += h,
            _ => p.deform.drot[i - 23] += h,
        };
        let h = 1e-4;
        for (i, a) in analytic.iter().enumerate() {
            let mut lo = p.clone();
            let mut hi = p.clone();
            perturb(&mut hi, i, h);
            perturb(&mut lo, i, -h);
            let n = (objective(&hi, t, &wm, &wc) - objective(&lo, t, &wm, &wc)) / (2.0 * h);
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < 1e-4, "param {i}: analytic {a} vs fd {n}");
        }
    }
}
