//! Synthetic dynamic scenes with known motion labels.
//!
//! Dynamic primitives follow analytic trajectories (linear drift, circular
//! orbit, oscillation). The ground-truth scene stores them as
//! high-degree polynomial deformations fitted by least squares, and every
//! frame is rendered from that scene by [`crate::render`].
//!
//! Dataset directory layout:
//!
//! ```text
//! frames/cam{c}_t{k}.png   masks/cam{c}_t{k}.png
//! cameras.txt   one camera JSON per line
//! times.txt     one timestamp per line
//! labels.txt    one 0/1 per ground-truth primitive
//! truth_scene.json
//! spec.json
//! ```

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::DeformCoeffs;
use crate::error::{ensure_contract, Error, Result};
use crate::image::{Image, Mask};
use crate::math::{logit, quat_normalize, Quat};
use crate::render::{render_subset, RenderSettings};
use crate::scene::{load_scene, save_scene, Camera, FrameSample, GaussianPrimitive, GaussianSet};

/// Logit magnitude used for ground-truth coefficients (`w ≈ 1 - 4.5e-5`).
pub const TRUTH_LOGIT: f64 = 10.0;
const FIT_SAMPLES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFamily {
    Linear,
    Orbit,
    Oscillation,
}

/// Analytic displacement from the canonical position; zero at `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trajectory {
    /// `amplitude * dir * t`
    Linear { dir: Vector3<f64>, amplitude: f64 },
    /// Arc of radius `radius` in the plane spanned by `u`, `v`, starting at
    /// the canonical position and sweeping `sweep` radians.
    Orbit { u: Vector3<f64>, v: Vector3<f64>, radius: f64, sweep: f64 },
    /// `amplitude * dir * sin(pi t)`
    Oscillation { dir: Vector3<f64>, amplitude: f64 },
}

impl Trajectory {
    pub fn offset(&self, t: f64) -> Vector3<f64> {
        match *self {
            Trajectory::Linear { dir, amplitude } => dir * (amplitude * t),
            Trajectory::Orbit { u, v, radius, sweep } => {
                let a = sweep * t;
                (u * (a.cos() - 1.0) + v * a.sin()) * radius
            }
            Trajectory::Oscillation { dir, amplitude } => dir * (amplitude * (std::f64::consts::PI * t).sin()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_static: usize,
    pub n_dynamic: usize,
    /// Cycled over the dynamic primitives.
    pub families: Vec<MotionFamily>,
    /// World units; linear drift length, orbit radius, oscillation peak.
    pub amplitude: f64,
    pub orbit_sweep: f64,
    pub n_frames: usize,
    pub n_cameras: usize,
    pub width: usize,
    pub height: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    /// Mean primitive scale in world units.
    pub gaussian_scale: f64,
    pub opacity: f64,
    pub camera_distance: f64,
    /// Angle between the outermost cameras, radians.
    pub camera_spread: f64,
    pub focal: f64,
    pub background: [f64; 3],
    /// Polynomial degree of the ground-truth deformation.
    pub truth_degree: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_static: 80,
            n_dynamic: 20,
            families: vec![MotionFamily::Linear, MotionFamily::Orbit, MotionFamily::Oscillation],
            amplitude: 0.4,
            orbit_sweep: std::f64::consts::FRAC_PI_2,
            n_frames: 24,
            n_cameras: 2,
            width: 128,
            height: 128,
            noise_std: 0.0,
            seed: 0,
            bounds_min: [-1.0; 3],
            bounds_max: [1.0; 3],
            gaussian_scale: 0.15,
            opacity: 0.8,
            camera_distance: 4.0,
            camera_spread: 0.6,
            focal: 150.0,
            background: [0.0; 3],
            truth_degree: 6,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure_contract!(self.n_static + self.n_dynamic >= 1, "spec needs at least one primitive");
        ensure_contract!(self.n_frames >= 1 && self.n_cameras >= 1, "spec needs frames and cameras");
        ensure_contract!(self.width >= 16 && self.height >= 16, "image must be at least 16x16");
        ensure_contract!(
            self.n_dynamic == 0 || (self.amplitude > 0.0 && !self.families.is_empty()),
            "dynamic primitives need a positive amplitude and at least one motion family"
        );
        ensure_contract!(self.noise_std >= 0.0, "noise_std must be non-negative");
        ensure_contract!(
            (0..3).all(|i| self.bounds_max[i] > self.bounds_min[i]),
            "bounds_max must exceed bounds_min"
        );
        ensure_contract!(
            self.gaussian_scale > 0.0 && self.opacity > 0.0 && self.opacity < 1.0,
            "gaussian_scale must be positive and opacity in (0, 1)"
        );
        ensure_contract!(self.focal > 0.0 && self.camera_distance > 0.0, "camera parameters must be positive");
        ensure_contract!(self.truth_degree >= 1, "truth_degree must be at least 1");
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        if self.n_frames == 1 {
            return vec![0.0];
        }
        (0..self.n_frames)
            .map(|k| k as f64 / (self.n_frames - 1) as f64)
            .collect()
    }

    /// Cameras on a horizontal arc, all looking at the bounds center.
    pub fn cameras(&self) -> Vec<Camera> {
        let center = Vector3::from_fn(|i, _| 0.5 * (self.bounds_min[i] + self.bounds_max[i]));
        (0..self.n_cameras)
            .map(|c| {
                let a = if self.n_cameras == 1 {
                    0.0
                } else {
                    self.camera_spread * (c as f64 / (self.n_cameras - 1) as f64 - 0.5)
                };
                let eye = center
                    + Vector3::new(a.sin(), -0.25, -a.cos()).normalize() * self.camera_distance;
                Camera::look_at(
                    self.width,
                    self.height,
                    self.focal,
                    eye,
                    center,
                    Vector3::new(0.0, -1.0, 0.0),
                )
            })
            .collect()
    }
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn random_rotation(rng: &mut impl Rng) -> Quat {
    let q: Quat = std::array::from_fn(|_| StandardNormal.sample(rng));
    quat_normalize(&q)
}

/// Least-squares coefficients of `sum_k c_k t^k`, `k = 1..=degree`, per axis.
pub fn fit_polynomial(f: impl Fn(f64) -> Vector3<f64>, degree: usize) -> Vec<f64> {
    let ts: Vec<f64> = (0..=FIT_SAMPLES).map(|j| j as f64 / FIT_SAMPLES as f64).collect();
    let a = DMatrix::from_fn(ts.len(), degree, |r, c| ts[r].powi(c as i32 + 1));
    let svd = a.svd(true, true);
    let mut coeffs = vec![0.0; 3 * degree];
    for axis in 0..3 {
        let b = DVector::from_iterator(ts.len(), ts.iter().map(|&t| f(t)[axis]));
        let x = svd.solve(&b, 1e-12).expect("SVD solve");
        for k in 0..degree {
            coeffs[3 * k + axis] = x[k];
        }
    }
    coeffs
}

/// Output of [`generate`].
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub truth: GaussianSet,
    pub trajectories: Vec<Option<Trajectory>>,
    /// 1 for moving primitives.
    pub labels: Vec<u8>,
    pub cameras: Vec<Camera>,
    pub times: Vec<f64>,
    /// Camera-major: index `c * n_frames + k`.
    pub frames: Vec<FrameSample>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut primitives = Vec::new();
    let mut trajectories = Vec::new();
    let mut labels = Vec::new();
    let n = spec.n_static + spec.n_dynamic;
    for i in 0..n {
        let dynamic = i >= spec.n_static;
        let margin = if dynamic { spec.amplitude } else { 0.0 };
        let mut mu0 = [0.0; 3];
        for a in 0..3 {
            let (lo, hi) = (spec.bounds_min[a], spec.bounds_max[a]);
            let m = margin.min(0.45 * (hi - lo));
            mu0[a] = lo + m + (hi - lo - 2.0 * m) * rng.random::<f64>();
        }
        let log_scale: [f64; 3] =
            std::array::from_fn(|_| (spec.gaussian_scale * (0.6 + 0.8 * rng.random::<f64>())).ln());
        let color: [f64; 3] = std::array::from_fn(|_| 0.1 + 0.8 * rng.random::<f64>());
        let rotation = random_rotation(&mut rng);
        let mut prim = GaussianPrimitive {
            mu0,
            log_scale,
            rotation,
            color,
            opacity_logit: logit(spec.opacity),
            dyn_logit: -TRUTH_LOGIT,
            deform: DeformCoeffs::zeros(spec.truth_degree),
        };
        let traj = dynamic.then(|| {
            let family = spec.families[(i - spec.n_static) % spec.families.len()];
            match family {
                MotionFamily::Linear => Trajectory::Linear {
                    dir: random_unit(&mut rng),
                    amplitude: spec.amplitude,
                },
                MotionFamily::Orbit => {
                    let u = random_unit(&mut rng);
                    let mut v = random_unit(&mut rng);
                    v = (v - u * u.dot(&v)).normalize();
                    Trajectory::Orbit {
                        u,
                        v,
                        radius: spec.amplitude,
                        sweep: spec.orbit_sweep,
                    }
                }
                MotionFamily::Oscillation => Trajectory::Oscillation {
                    dir: random_unit(&mut rng),
                    amplitude: spec.amplitude,
                },
            }
        });
        if let Some(traj) = traj {
            prim.dyn_logit = TRUTH_LOGIT;
            let w = prim.dyn_coeff();
            prim.deform.dmu = fit_polynomial(|t| traj.offset(t), spec.truth_degree)
                .into_iter()
                .map(|c| c / w)
                .collect();
        }
        labels.push(u8::from(dynamic));
        trajectories.push(traj);
        primitives.push(prim);
    }
    let truth = GaussianSet::new(primitives);
    let cameras = spec.cameras();
    let times = spec.times();
    let settings = RenderSettings {
        background: spec.background,
        ..Default::default()
    };
    let dynamic_flags: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    let jobs: Vec<(usize, usize)> = (0..cameras.len())
        .flat_map(|c| (0..times.len()).map(move |k| (c, k)))
        .collect();
    let frames = jobs
        .par_iter()
        .map(|&(c, k)| {
            let (cam, t) = (&cameras[c], times[k]);
            let mut image = render_subset(&truth, cam, t, None, &settings).image;
            if spec.noise_std > 0.0 {
                let mut frng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(1 + (c * times.len() + k) as u64)));
                let normal = Normal::new(0.0, spec.noise_std).expect("valid noise std");
                image.data.iter_mut().for_each(|v| *v += normal.sample(&mut frng));
            }
            let dyn_img = render_subset(&truth, cam, t, Some(&dynamic_flags), &settings).image;
            FrameSample {
                image,
                camera: cam.clone(),
                t,
                gt_mask: Some(support_mask(&dyn_img, spec.background)),
            }
        })
        .collect();
    Ok(SyntheticScene {
        truth,
        trajectories,
        labels,
        cameras,
        times,
        frames,
    })
}

/// Pixels where any channel differs from the background by more than 1/255.
pub fn support_mask(img: &Image, background: [f64; 3]) -> Mask {
    let mut m = Mask::zeros(img.width, img.height);
    for (p, px) in img.data.chunks_exact(3).enumerate() {
        m.data[p] = u8::from((0..3).any(|c| (px[c] - background[c]).abs() > 1.0 / 255.0));
    }
    m
}

/// A loaded dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: Option<SyntheticSpec>,
    pub truth: Option<GaussianSet>,
    pub labels: Option<Vec<u8>>,
    pub cameras: Vec<Camera>,
    pub times: Vec<f64>,
    /// Camera-major, like [`SyntheticScene::frames`].
    pub frames: Vec<FrameSample>,
}

fn frame_name(c: usize, k: usize) -> String {
    format!("cam{c}_t{k}.png")
}

impl Dataset {
    pub fn background(&self) -> [f64; 3] {
        self.spec.as_ref().map_or([0.0; 3], |s| s.background)
    }

    pub fn frame_index(&self, c: usize, k: usize) -> usize {
        c * self.times.len() + k
    }

    /// Frames whose timestamp index satisfies `k % every == every / 2` are
    /// held out; the rest train. Returns `(train, held_out)` frame indices.
    pub fn holdout_split(&self, every: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for c in 0..self.cameras.len() {
            for k in 0..self.times.len() {
                let i = self.frame_index(c, k);
                if every > 1 && k % every == every / 2 {
                    held.push(i);
                } else {
                    train.push(i);
                }
            }
        }
        (train, held)
    }

    pub fn from_scene(spec: &SyntheticSpec, scene: SyntheticScene) -> Self {
        Self {
            spec: Some(spec.clone()),
            truth: Some(scene.truth),
            labels: Some(scene.labels),
            cameras: scene.cameras,
            times: scene.times,
            frames: scene.frames,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let io = |p: &Path, e| Error::io(p, e);
        fs::create_dir_all(dir.join("frames")).map_err(|e| io(dir, e))?;
        fs::create_dir_all(dir.join("masks")).map_err(|e| io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write(
            "cameras.txt",
            self.cameras.iter().map(|c| c.to_json() + "\n").collect(),
        )?;
        write("times.txt", self.times.iter().map(|t| format!("{t}\n")).collect())?;
        if let Some(labels) = &self.labels {
            write("labels.txt", labels.iter().map(|l| format!("{l}\n")).collect())?;
        }
        if let Some(spec) = &self.spec {
            write("spec.json", serde_json::to_string_pretty(spec).expect("spec serializes") + "\n")?;
        }
        if let Some(truth) = &self.truth {
            save_scene(truth, dir.join("truth_scene.json"))?;
        }
        for c in 0..self.cameras.len() {
            for k in 0..self.times.len() {
                let f = &self.frames[self.frame_index(c, k)];
                let name = frame_name(c, k);
                f.image.save_png(dir.join("frames").join(&name))?;
                f.image
                    .write_float_dump(dir.join("frames").join(name.replace(".png", ".f32")))?;
                if let Some(m) = &f.gt_mask {
                    m.save_png(dir.join("masks").join(&name))?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let cam_path = dir.join("cameras.txt");
        let cameras = read("cameras.txt")?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let cam: Camera = serde_json::from_str(l)
                    .map_err(|e| Error::parse(&cam_path, i + 1, e.column(), e.to_string()))?;
                cam.validate()
                    .map_err(|e| Error::parse(&cam_path, i + 1, 0, e.to_string()))?;
                Ok(cam)
            })
            .collect::<Result<Vec<_>>>()?;
        let times_path = dir.join("times.txt");
        let times = read("times.txt")?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(&times_path, i + 1, 1, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        ensure_contract!(!cameras.is_empty() && !times.is_empty(), "dataset has no cameras or times");
        let labels = if dir.join("labels.txt").exists() {
            let lp = dir.join("labels.txt");
            Some(
                read("labels.txt")?
                    .lines()
                    .enumerate()
                    .filter(|(_, l)| !l.trim().is_empty())
                    .map(|(i, l)| match l.trim() {
                        "0" => Ok(0),
                        "1" => Ok(1),
                        other => Err(Error::parse(&lp, i + 1, 1, format!("expected 0 or 1, got {other:?}"))),
                    })
                    .collect::<Result<Vec<u8>>>()?,
            )
        } else {
            None
        };
        let spec = if dir.join("spec.json").exists() {
            let sp = dir.join("spec.json");
            Some(serde_json::from_str(&read("spec.json")?).map_err(|e| Error::from_json(&sp, e))?)
        } else {
            None
        };
        let truth = if dir.join("truth_scene.json").exists() {
            Some(load_scene(dir.join("truth_scene.json"))?.0)
        } else {
            None
        };
        let mut frames = Vec::new();
        for cam in &cameras {
            let c = frames.len() / times.len();
            for (k, &t) in times.iter().enumerate() {
                let image = Image::load_png(dir.join("frames").join(frame_name(c, k)))?;
                let mask_path = dir.join("masks").join(frame_name(c, k));
                let gt_mask = if mask_path.exists() {
                    Some(Mask::load_png(&mask_path)?)
                } else {
                    None
                };
                let f = FrameSample {
                    image,
                    camera: cam.clone(),
                    t,
                    gt_mask,
                };
                f.validate()?;
                frames.push(f);
            }
        }
        if let (Some(truth), Some(labels)) = (&truth, &labels) {
            ensure_contract!(
                truth.len() == labels.len(),
                "labels.txt has {} entries for {} primitives",
                labels.len(),
                truth.len()
            );
        }
        Ok(Self {
            spec,
            truth,
            labels,
            cameras,
            times,
            frames,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_fit_recovers_polynomials() {
        let c = fit_polynomial(|t| Vector3::new(2.0 * t, -t * t, 0.5 * t + 3.0 * t * t), 3);
        let expect = [2.0, 0.0, 0.5, 0.0, -1.0, 3.0, 0.0, 0.0, 0.0];
        for (a, b) in c.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{c:?}");
        }
    }

    #[test]
    fn truth_trajectories_are_reproduced() {
        let spec = SyntheticSpec {
            n_static: 2,
            n_dynamic: 6,
            n_frames: 3,
            width: 32,
            height: 32,
            ..Default::default()
        };
        let scene = generate(&spec).unwrap();
        for (p, traj) in scene.truth.primitives.iter().zip(&scene.trajectories) {
            let Some(traj) = traj else { continue };
            for &t in &[0.0, 0.3, 0.77, 1.0] {
                let d = crate::deform::deformed_params(p, t, Default::default());
                let expect = Vector3::from(p.mu0) + traj.offset(t);
                assert!((d.mean - expect).norm() < 2e-3);
            }
        }
    }

    #[test]
    fn zero_amplitude_is_rejected() {
        let spec = SyntheticSpec {
            amplitude: 0.0,
            ..Default::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Contract(_))));
    }
}
