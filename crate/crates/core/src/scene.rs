//! Gaussian scene representation, cameras, and their text formats.
//!
//! Scene files are JSON documents:
//!
//! ```text
//! { "version": "sdd-scene-v1",
//!   "primitives": [ { "mu0": [..3], "log_scale": [..3], "rotation": [w,x,y,z],
//!                     "color": [..3], "opacity_logit": f, "dyn_logit": f,
//!                     "deform": { "degree": K, "dmu": [..3K], "dlogs": [..3K], "drot": [..3K] } } ] }
//! ```
//!
//! Floats are written in shortest round-trip form, so `load(save(s)) == s`
//! bit for bit.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::deform::DeformCoeffs;
use crate::error::{ensure_contract, Error, Result};
use crate::image::{Image, Mask};
use crate::math::{self, logit, sigmoid, Quat};

pub const SCENE_VERSION: &str = "sdd-scene-v1";

/// Tolerance on quaternion norm before a loaded rotation counts as
/// non-unit.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPrimitive {
    pub mu0: [f64; 3],
    pub log_scale: [f64; 3],
    /// `[w, x, y, z]`, unit norm between optimizer steps.
    pub rotation: Quat,
    /// Degree-0 RGB.
    pub color: [f64; 3],
    pub opacity_logit: f64,
    pub dyn_logit: f64,
    pub deform: DeformCoeffs,
}

impl GaussianPrimitive {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    /// Dynamic-perception coefficient `w`.
    pub fn dyn_coeff(&self) -> f64 {
        sigmoid(self.dyn_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        Vector3::from(self.log_scale).map(f64::exp)
    }

    pub fn rotmat(&self) -> Matrix3<f64> {
        math::quat_to_rotmat(&math::quat_normalize(&self.rotation))
    }

    /// Canonical covariance `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        math::covariance_from(&self.rotmat(), &self.scale())
    }

    pub fn normalize_rotation(&mut self) {
        self.rotation = math::quat_normalize(&self.rotation);
    }

    pub fn all_finite(&self) -> bool {
        self.mu0
            .iter()
            .chain(&self.log_scale)
            .chain(&self.rotation)
            .chain(&self.color)
            .chain([&self.opacity_logit, &self.dyn_logit])
            .all(|v| v.is_finite())
            && self.deform.all_finite()
    }
}

pub fn covariance(prim: &GaussianPrimitive) -> Matrix3<f64> {
    prim.covariance()
}

pub fn dyn_coeff(prim: &GaussianPrimitive) -> f64 {
    prim.dyn_coeff()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSet {
    pub version: String,
    pub primitives: Vec<GaussianPrimitive>,
}

impl Default for GaussianSet {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

/// Initialization recipe for a box-seeded scene.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxInit {
    pub count: usize,
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub degree: usize,
    pub opacity: f64,
    /// Fraction of the largest box side used as initial scale.
    pub scale_fraction: f64,
}

impl BoxInit {
    pub fn new(count: usize, min: [f64; 3], max: [f64; 3]) -> Self {
        Self {
            count,
            min,
            max,
            degree: crate::deform::DEFAULT_DEGREE,
            opacity: 0.1,
            scale_fraction: 0.05,
        }
    }
}

impl GaussianSet {
    pub fn new(primitives: Vec<GaussianPrimitive>) -> Self {
        Self {
            version: SCENE_VERSION.to_string(),
            primitives,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Uniform random means in the box, isotropic scale, identity rotation,
    /// mid-gray color, `w = 0.5`, zero deformation.
    pub fn init_in_box(init: &BoxInit, rng: &mut impl Rng) -> Self {
        let extent = (0..3)
            .map(|i| init.max[i] - init.min[i])
            .fold(0.0f64, f64::max);
        let log_s = (init.scale_fraction * extent).ln();
        let primitives = (0..init.count)
            .map(|_| {
                let mut mu0 = [0.0; 3];
                for i in 0..3 {
                    mu0[i] = init.min[i] + (init.max[i] - init.min[i]) * rng.random::<f64>();
                }
                GaussianPrimitive {
                    mu0,
                    log_scale: [log_s; 3],
                    rotation: math::IDENTITY_QUAT,
                    color: [0.5; 3],
                    opacity_logit: logit(init.opacity),
                    dyn_logit: 0.0,
                    deform: DeformCoeffs::zeros(init.degree),
                }
            })
            .collect();
        Self::new(primitives)
    }

    /// Copy containing only the primitives whose flag is set, order kept.
    pub fn filtered(&self, keep: &[bool]) -> GaussianSet {
        GaussianSet {
            version: self.version.clone(),
            primitives: self
                .primitives
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(p, _)| p.clone())
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    /// Parses a scene document. Returns the set and warnings for recoverable
    /// issues (non-unit quaternions are renormalized).
    pub fn from_json(text: &str, path: &Path) -> Result<(GaussianSet, Vec<String>)> {
        #[derive(Deserialize)]
        struct Probe {
            version: Option<String>,
        }
        let probe: Probe = serde_json::from_str(text).map_err(|e| Error::from_json(path, e))?;
        match probe.version.as_deref() {
            Some(SCENE_VERSION) => {}
            Some(other) => {
                return Err(Error::Version {
                    path: path.to_path_buf(),
                    found: other.to_string(),
                    expected: SCENE_VERSION.to_string(),
                })
            }
            None => return Err(Error::parse(path, 0, 0, "missing field `version`")),
        }
        let mut set: GaussianSet = serde_json::from_str(text).map_err(|e| Error::from_json(path, e))?;
        let mut warnings = Vec::new();
        for (i, p) in set.primitives.iter_mut().enumerate() {
            if !p.deform.is_consistent() {
                return Err(Error::parse(
                    path,
                    0,
                    0,
                    format!("primitives[{i}].deform: arrays must hold 3*degree values with degree >= 1"),
                ));
            }
            if !p.all_finite() {
                return Err(Error::parse(path, 0, 0, format!("primitives[{i}]: non-finite value")));
            }
            let n = math::quat_norm(&p.rotation);
            if n == 0.0 {
                return Err(Error::parse(path, 0, 0, format!("primitives[{i}].rotation: zero quaternion")));
            }
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                p.normalize_rotation();
                warnings.push(format!("primitives[{i}].rotation: norm {n} renormalized to 1"));
            }
        }
        Ok((set, warnings))
    }
}

pub fn save_scene(set: &GaussianSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, set.to_json()).map_err(|e| Error::io(path, e))
}

/// Loads a scene file; see [`GaussianSet::from_json`] for the warnings.
pub fn load_scene(path: impl AsRef<Path>) -> Result<(GaussianSet, Vec<String>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GaussianSet::from_json(&text, path)
}

/// Pinhole camera. `world_to_cam` is a row-major 3×4 rigid transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_cam: [f64; 12],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn rotation(&self) -> Matrix3<f64> {
        let m = &self.world_to_cam;
        Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10])
    }

    pub fn translation(&self) -> Vector3<f64> {
        let m = &self.world_to_cam;
        Vector3::new(m[3], m[7], m[11])
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn from_rt(
        width: usize,
        height: usize,
        focal: f64,
        rot: &Matrix3<f64>,
        trans: &Vector3<f64>,
    ) -> Self {
        let mut m = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                m[4 * r + c] = rot[(r, c)];
            }
            m[4 * r + 3] = trans[r];
        }
        Self {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            world_to_cam: m,
            near: 0.1,
            far: 100.0,
        }
    }

    /// Camera at `eye` looking at `target`, +y of the image pointing along
    /// `-up`, +z forward.
    pub fn look_at(
        width: usize,
        height: usize,
        focal: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let trans = -(rot * eye);
        Self::from_rt(width, height, focal, &rot, &trans)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_contract!(self.width > 0 && self.height > 0, "camera has zero-sized image");
        ensure_contract!(self.fx > 0.0 && self.fy > 0.0, "camera focal lengths must be positive");
        ensure_contract!(
            self.near > 0.0 && self.near < self.far,
            "camera requires 0 < near < far (got {} / {})",
            self.near,
            self.far
        );
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        ensure_contract!(err <= 1e-6, "camera rotation is not orthonormal (error {err:e})");
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("camera serializes")
    }
}

pub fn load_camera(path: impl AsRef<Path>) -> Result<Camera> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cam: Camera = serde_json::from_str(text.trim()).map_err(|e| Error::from_json(path, e))?;
    cam.validate()
        .map_err(|e| Error::parse(path, 0, 0, e.to_string()))?;
    Ok(cam)
}

pub fn save_camera(cam: &Camera, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, cam.to_json() + "\n").map_err(|e| Error::io(path, e))
}

/// One supervised observation.
#[derive(Clone, Debug)]
pub struct FrameSample {
    pub image: Image,
    pub camera: Camera,
    /// Normalized timestamp in `[0, 1]`.
    pub t: f64,
    pub gt_mask: Option<Mask>,
}

impl FrameSample {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        ensure_contract!(
            self.image.width == self.camera.width && self.image.height == self.camera.height,
            "frame image is {}x{} but camera is {}x{}",
            self.image.width,
            self.image.height,
            self.camera.width,
            self.camera.height
        );
        ensure_contract!((0.0..=1.0).contains(&self.t), "frame time {} outside [0, 1]", self.t);
        if let Some(m) = &self.gt_mask {
            ensure_contract!(
                m.width == self.image.width && m.height == self.image.height,
                "ground-truth mask shape differs from image"
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prim(log_scale: [f64; 3], rotation: Quat) -> GaussianPrimitive {
        GaussianPrimitive {
            mu0: [0.0; 3],
            log_scale,
            rotation,
            color: [1.0, 0.0, 0.0],
            opacity_logit: 0.0,
            dyn_logit: 0.0,
            deform: DeformCoeffs::zeros(2),
        }
    }

    #[test]
    fn covariance_examples() {
        let id = prim([0.0; 3], math::IDENTITY_QUAT);
        assert_relative_eq!(covariance(&id), Matrix3::identity(), epsilon = 1e-15);

        let ln2 = 2f64.ln();
        let stretched = prim([ln2, 0.0, 0.0], math::IDENTITY_QUAT);
        assert_relative_eq!(
            covariance(&stretched),
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-12
        );

        let h = std::f64::consts::FRAC_PI_4;
        let rotated = prim([ln2, 0.0, 0.0], [h.cos(), 0.0, 0.0, h.sin()]);
        assert_relative_eq!(
            covariance(&rotated),
            Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn dyn_coeff_examples() {
        let mut p = prim([0.0; 3], math::IDENTITY_QUAT);
        assert_eq!(dyn_coeff(&p), 0.5);
        p.dyn_logit = 2.0;
        assert_relative_eq!(dyn_coeff(&p), 0.8807970779778823, epsilon = 1e-12);
        p.dyn_logit = 1e3;
        assert_eq!(dyn_coeff(&p), 1.0);
    }

    #[test]
    fn box_init_matches_recipe() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = BoxInit::new(50, [-1.0, -2.0, 0.0], [1.0, 2.0, 1.0]);
        let set = GaussianSet::init_in_box(&init, &mut rng);
        assert_eq!(set.len(), 50);
        for p in &set.primitives {
            for i in 0..3 {
                assert!(p.mu0[i] >= init.min[i] && p.mu0[i] <= init.max[i]);
                assert_relative_eq!(p.log_scale[i], (0.05f64 * 4.0).ln(), epsilon = 1e-15);
            }
            assert_eq!(p.dyn_coeff(), 0.5);
            assert_relative_eq!(p.opacity(), 0.1, epsilon = 1e-12);
            assert!(p.deform.dmu.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at(
            64,
            48,
            50.0,
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
        );
        cam.validate().unwrap();
        let p = cam.to_camera(&Vector3::zeros());
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 4.0), epsilon = 1e-12);
        assert_relative_eq!(cam.camera_center(), Vector3::new(0.0, 0.0, -4.0), epsilon = 1e-12);
    }

    #[test]
    fn camera_validation_rejects_bad_planes() {
        let mut cam = Camera::look_at(8, 8, 10.0, Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::y());
        cam.near = 2.0;
        cam.far = 1.0;
        assert!(cam.validate().is_err());
    }
}
