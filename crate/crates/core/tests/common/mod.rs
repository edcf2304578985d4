#![allow(dead_code)]

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sddgs::decouple::{partition, render_split, PartitionMode};
use sddgs::deform::DeformCoeffs;
use sddgs::image::Mask;
use sddgs::nalgebra::Vector3;
use sddgs::params;
use sddgs::render::{render_subset, RenderSettings};
use sddgs::scene::{Camera, FrameSample, GaussianPrimitive, GaussianSet};
use sddgs::train::{objective, TrainConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Primitive near the origin with nonzero deformation. `w` logits stay
/// at least 0.5 away from the training threshold.
pub fn random_primitive(rng: &mut impl Rng, degree: usize) -> GaussianPrimitive {
    let mut deform = DeformCoeffs::zeros(degree);
    for v in deform.dmu.iter_mut() {
        *v = uniform(rng, -0.2, 0.2);
    }
    for v in deform.dlogs.iter_mut() {
        *v = uniform(rng, -0.2, 0.2);
    }
    for v in deform.drot.iter_mut() {
        *v = uniform(rng, -0.3, 0.3);
    }
    let q: [f64; 4] = std::array::from_fn(|_| uniform(rng, -1.0, 1.0));
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    GaussianPrimitive {
        mu0: std::array::from_fn(|_| uniform(rng, -0.6, 0.6)),
        log_scale: std::array::from_fn(|_| uniform(rng, -1.6, -0.9)),
        rotation: [q[0] + 2.0, q[1], q[2], q[3]],
        color: std::array::from_fn(|_| uniform(rng, 0.1, 0.9)),
        opacity_logit: uniform(rng, -0.5, 2.0),
        dyn_logit: sign * uniform(rng, 0.5, 2.0),
        deform,
    }
}

pub fn random_scene(rng: &mut impl Rng, n: usize, degree: usize) -> GaussianSet {
    GaussianSet::new((0..n).map(|_| random_primitive(rng, degree)).collect())
}

pub fn camera(width: usize, height: usize, focal: f64, azimuth: f64) -> Camera {
    let eye = Vector3::new(4.0 * azimuth.sin(), -0.8, -4.0 * azimuth.cos());
    Camera::look_at(width, height, focal, eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0))
}

/// Targets rendered from a perturbed copy of `set`.
pub fn frames_from(set: &GaussianSet, cams: &[Camera], times: &[f64], seed: u64) -> Vec<FrameSample> {
    let mut r = rng(seed);
    let mut truth = set.clone();
    for p in &mut truth.primitives {
        for c in &mut p.color {
            *c = (*c + uniform(&mut r, -0.2, 0.2)).clamp(0.0, 1.0);
        }
        for m in &mut p.mu0 {
            *m += uniform(&mut r, -0.05, 0.05);
        }
    }
    cams.iter()
        .zip(times)
        .map(|(cam, &t)| FrameSample {
            image: render_subset(&truth, cam, t, None, &RenderSettings::default()).image,
            camera: cam.clone(),
            t,
            gt_mask: None,
        })
        .collect()
}

/// Left half of the image is 1.
pub fn half_mask(width: usize, height: usize) -> Mask {
    let mut m = Mask::zeros(width, height);
    for y in 0..height {
        for x in 0..width / 2 {
            m.data[y * width + x] = 1;
        }
    }
    m
}

/// Total objective summed over frames, as a function of the flattened
/// parameter vector.
pub fn summed_objective(set: &GaussianSet, frames: &[FrameSample], masks: &[Mask], step: usize, cfg: &TrainConfig) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = params::zero_grad(set);
    for (f, m) in frames.iter().zip(masks) {
        let (b, g, _) = objective(set, f, Some(m), step, cfg).unwrap();
        value += b.total;
        params::accumulate(&mut grad, &g);
    }
    (value, grad.iter().flat_map(params::flatten).collect())
}

pub fn flat(set: &GaussianSet) -> Vec<f64> {
    set.primitives.iter().flat_map(params::flatten).collect()
}

pub fn with_flat(set: &GaussianSet, theta: &[f64]) -> GaussianSet {
    let mut out = set.clone();
    let k = theta.len() / set.len().max(1);
    for (p, chunk) in out.primitives.iter_mut().zip(theta.chunks_exact(k)) {
        params::unflatten(p, chunk);
    }
    out
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_slot: String,
    pub checked: usize,
}

/// Central differences with step `h` on every parameter. Relative error
/// is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradcheck(set: &GaussianSet, frames: &[FrameSample], masks: &[Mask], step: usize, cfg: &TrainConfig, h: f64) -> GradCheck {
    let (_, analytic) = summed_objective(set, frames, masks, step, cfg);
    let theta = flat(set);
    let degree = set.primitives[0].deform.degree;
    let layout = params::layout(degree);
    let k = layout.len();
    let mut worst = (0.0, String::new());
    for i in 0..theta.len() {
        let mut tp = theta.clone();
        tp[i] += h;
        let mut tm = theta.clone();
        tm[i] -= h;
        let fp = summed_objective(&with_flat(set, &tp), frames, masks, step, cfg).0;
        let fm = summed_objective(&with_flat(set, &tm), frames, masks, step, cfg).0;
        let num = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
        if rel > worst.0 {
            worst = (rel, format!("primitive {} slot {} ({}): analytic {a:e} numeric {num:e}", i / k, i % k, layout[i % k].name()));
        }
    }
    GradCheck {
        max_rel_err: worst.0,
        worst_slot: worst.1,
        checked: theta.len(),
    }
}

/// The acceptance gradient-check problem: 5 primitives, 16x16, 2 frames.
pub const GRADCHECK_GAP: f64 = 0.07;

/// Full, dynamic-only and static-only renders under the training split.
pub fn three_renders(set: &GaussianSet, f: &FrameSample, cfg: &TrainConfig) -> [sddgs::image::Image; 3] {
    let settings = cfg.render_settings();
    let part = partition(set, PartitionMode::Training, cfg.tau_train, cfg.tau_train).unwrap();
    let (d, s) = render_split(set, &f.camera, f.t, &part, &settings).unwrap();
    [render_subset(set, &f.camera, f.t, None, &settings).image, d.image, s.image]
}

/// Primitives are broad and translucent so every one of them stays above
/// the alpha cutoff at every pixel; finite differences then never cross a
/// cutoff.
pub fn gradcheck_problem(seed: u64) -> (GaussianSet, Vec<FrameSample>, Vec<Mask>, TrainConfig) {
    let mut r = rng(seed);
    let mut set = random_scene(&mut r, 5, 2);
    for p in &mut set.primitives {
        p.mu0.iter_mut().for_each(|m| *m *= 0.4);
        p.log_scale.iter_mut().for_each(|s| *s += 1.2);
        p.opacity_logit = 0.5 * p.opacity_logit - 0.2;
    }
    let cams = [camera(16, 16, 36.0, 0.0), camera(16, 16, 36.0, 0.4)];
    // Every target value is at least GAP away from the full, static-only
    // and dynamic-only renders, so no L1 term sits near its kink.
    let cfg = TrainConfig::default();
    let frames = frames_from(&set, &cams, &[0.3, 0.8], seed + 1)
        .into_iter()
        .map(|mut f| {
            let renders = three_renders(&set, &f, &cfg);
            for (i, t) in f.image.data.iter_mut().enumerate() {
                *t = loop {
                    let v = r.random::<f64>();
                    if renders.iter().all(|img| (img.data[i] - v).abs() >= GRADCHECK_GAP) {
                        break v;
                    }
                };
            }
            f
        })
        .collect();
    let masks = vec![half_mask(16, 16), half_mask(16, 16).complement()];
    (set, frames, masks, cfg)
}
