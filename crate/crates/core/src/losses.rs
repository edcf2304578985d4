//! Training objective terms and their image-space adjoints.
//!
//! The total objective is
//! `l_recon + lambda_bi(step) * l_bi + l_asg`, where `l_recon` is
//! `L1 + ssim_weight * D-SSIM` on the full render, `l_bi` the mean binary
//! entropy of the dynamic coefficients, and `l_asg` the mask-routed
//! supervision of the static-only and dynamic-only renders.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Result};
use crate::image::{Image, Mask};
use crate::scene::GaussianSet;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Coefficients are clamped to `[W_EPS, 1 - W_EPS]` inside logarithms.
pub const W_EPS: f64 = 1e-7;

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "l1_loss")?;
    let n = a.data.len() as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// `l1_loss` and its gradient with respect to `a`.
pub fn l1_loss_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let value = l1_loss(a, b)?;
    let n = a.data.len() as f64;
    let mut grad = Image::new(a.width, a.height);
    for ((g, x), y) in grad.data.iter_mut().zip(&a.data).zip(&b.data) {
        *g = sign(x - y) / n;
    }
    Ok((value, grad))
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable same-size blur with zero padding. Self-adjoint because the
/// kernel is symmetric.
fn blur(src: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * row[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (k, kv) in kernel.iter().enumerate() {
            let yy = y as isize + k as isize - r;
            if yy < 0 || yy as usize >= h {
                continue;
            }
            let src_row = &tmp[yy as usize * w..(yy as usize + 1) * w];
            let dst_row = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM and optionally its gradient with respect to `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    a.ensure_same_shape(b, "ssim")?;
    ensure_contract!(
        a.width >= SSIM_WINDOW && a.height >= SSIM_WINDOW,
        "ssim: image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
        a.width,
        a.height
    );
    let (w, h) = (a.width, a.height);
    let kernel = gaussian_kernel();
    let n = (w * h * 3) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h));
    for c in 0..3 {
        let ca = channel(a, c);
        let cb = channel(b, c);
        let sq_a: Vec<f64> = ca.iter().map(|v| v * v).collect();
        let sq_b: Vec<f64> = cb.iter().map(|v| v * v).collect();
        let prod: Vec<f64> = ca.iter().zip(&cb).map(|(x, y)| x * y).collect();
        let mu_a = blur(&ca, w, h, &kernel);
        let mu_b = blur(&cb, w, h, &kernel);
        let s_aa = blur(&sq_a, w, h, &kernel);
        let s_bb = blur(&sq_b, w, h, &kernel);
        let s_ab = blur(&prod, w, h, &kernel);
        let mut g_mu = vec![0.0; w * h];
        let mut g_saa = vec![0.0; w * h];
        let mut g_sab = vec![0.0; w * h];
        for i in 0..w * h {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let a1 = 2.0 * ma * mb + SSIM_C1;
            let a2 = 2.0 * (s_ab[i] - ma * mb) + SSIM_C2;
            let b1 = ma * ma + mb * mb + SSIM_C1;
            let b2 = (s_aa[i] - ma * ma) + (s_bb[i] - mb * mb) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let inv = 1.0 / (b1 * b2);
                g_mu[i] = ((2.0 * mb * a2 - 2.0 * mb * a1) * inv - s * (2.0 * ma / b1 - 2.0 * ma / b2)) / n;
                g_sab[i] = 2.0 * a1 * inv / n;
                g_saa[i] = -s / b2 / n;
            }
        }
        if let Some(grad) = grad.as_mut() {
            let bg_mu = blur(&g_mu, w, h, &kernel);
            let bg_saa = blur(&g_saa, w, h, &kernel);
            let bg_sab = blur(&g_sab, w, h, &kernel);
            for i in 0..w * h {
                grad.data[3 * i + c] = bg_mu[i] + 2.0 * ca[i] * bg_saa[i] + cb[i] * bg_sab[i];
            }
        }
    }
    Ok((total / n, grad))
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, zero padding, mean over
/// channels).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// D-SSIM, `(1 - SSIM) / 2`.
pub fn ssim_loss(a: &Image, b: &Image) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

/// D-SSIM and its gradient with respect to `a`.
pub fn ssim_loss_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_impl(a, b, true)?;
    let mut g = g.expect("gradient requested");
    g.data.iter_mut().for_each(|v| *v *= -0.5);
    Ok(((1.0 - s) / 2.0, g))
}

/// Natural-log Bernoulli entropy.
pub fn binary_entropy(w: f64) -> f64 {
    let w = w.clamp(W_EPS, 1.0 - W_EPS);
    -(w * w.ln() + (1.0 - w) * (1.0 - w).ln())
}

/// `d binary_entropy / dw`; zero where the clamp is active.
pub fn binary_entropy_grad(w: f64) -> f64 {
    if !(W_EPS..=1.0 - W_EPS).contains(&w) {
        return 0.0;
    }
    ((1.0 - w) / w).ln()
}

/// Progressive weight `1 - exp(-rate * step)`.
pub fn lambda_bi(step: usize, rate: f64) -> f64 {
    -(-rate * step as f64).exp_m1()
}

/// Scene-level entropy: mean over primitives, and its gradient per
/// `dyn_logit`.
pub fn scene_entropy(set: &GaussianSet) -> (f64, Vec<f64>) {
    let n = set.len().max(1) as f64;
    let mut value = 0.0;
    let grads = set
        .primitives
        .iter()
        .map(|p| {
            let w = p.dyn_coeff();
            value += binary_entropy(w);
            binary_entropy_grad(w) * w * (1.0 - w) / n
        })
        .collect();
    (value / n, grads)
}

/// Masked L1 over the whole image: `mean(weight * |a - b|)` where the
/// weight is the mask (or its complement).
fn masked_l1_grad(a: &Image, b: &Image, mask: &Mask, on: u8) -> (f64, Image) {
    let n = a.data.len() as f64;
    let mut grad = Image::new(a.width, a.height);
    let mut value = 0.0;
    for (p, &m) in mask.data.iter().enumerate() {
        if (m != 0) != (on != 0) {
            continue;
        }
        for c in 0..3 {
            let i = 3 * p + c;
            let d = a.data[i] - b.data[i];
            value += d.abs();
            grad.data[i] = sign(d) / n;
        }
    }
    (value / n, grad)
}

fn masked_branch(render: &Image, target: &Image, mask: &Mask, on: u8) -> Result<(f64, Image)> {
    let region = if on != 0 { mask.clone() } else { mask.complement() };
    let (l1, mut g) = masked_l1_grad(render, target, mask, on);
    let (ds, gs) = ssim_loss_grad(&render.masked(&region), &target.masked(&region))?;
    for (p, &m) in region.data.iter().enumerate() {
        if m != 0 {
            for c in 0..3 {
                g.data[3 * p + c] += gs.data[3 * p + c];
            }
        }
    }
    Ok((l1 + ds, g))
}

/// Mask-routed supervision: the static render is compared with the target
/// where `mask == 0`, the dynamic render where `mask == 1`.
pub fn asg_loss(img_static: &Image, img_dynamic: &Image, target: &Image, mask: &Mask) -> Result<f64> {
    Ok(asg_loss_grad(img_static, img_dynamic, target, mask)?.0)
}

/// `asg_loss` with gradients for the static and dynamic renders.
pub fn asg_loss_grad(
    img_static: &Image,
    img_dynamic: &Image,
    target: &Image,
    mask: &Mask,
) -> Result<(f64, Image, Image)> {
    img_static.ensure_same_shape(target, "asg_loss static")?;
    img_dynamic.ensure_same_shape(target, "asg_loss dynamic")?;
    ensure_contract!(
        mask.width == target.width && mask.height == target.height,
        "asg_loss: mask shape differs from images"
    );
    ensure_contract!(mask.data.iter().all(|&m| m <= 1), "asg_loss: mask must be binary");
    let (ls, gs) = masked_branch(img_static, target, mask, 0)?;
    let (ld, gd) = masked_branch(img_dynamic, target, mask, 1)?;
    Ok((ls + ld, gs, gd))
}

/// Which terms of the objective are active and how they are weighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub ssim_weight: f64,
    pub schedule_rate: f64,
    pub use_lbi: bool,
    pub use_schedule: bool,
    pub use_asg: bool,
    pub asg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ssim_weight: 0.2,
            schedule_rate: 1e-4,
            use_lbi: true,
            use_schedule: true,
            use_asg: true,
            asg_weight: 1.0,
        }
    }
}

impl LossConfig {
    /// Entropy weight at `step`: the schedule when enabled, otherwise a
    /// constant 1; zero when the entropy term is off.
    pub fn entropy_weight(&self, step: usize) -> f64 {
        match (self.use_lbi, self.use_schedule) {
            (false, _) => 0.0,
            (true, true) => lambda_bi(step, self.schedule_rate),
            (true, false) => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_recon: f64,
    pub l_bi: f64,
    pub lambda_bi: f64,
    /// Weighted supervision term as it enters `total`.
    pub l_asg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Checks `total == l_recon + lambda_bi * l_bi + l_asg` to `tol` and
    /// that every term is finite and non-negative.
    pub fn check(&self, tol: f64) -> Result<()> {
        let terms = [self.l_recon, self.l_bi, self.lambda_bi, self.l_asg, self.total];
        ensure_contract!(
            terms.iter().all(|v| v.is_finite() && *v >= 0.0),
            "loss terms must be finite and non-negative: {self:?}"
        );
        let sum = self.l_recon + self.lambda_bi * self.l_bi + self.l_asg;
        ensure_contract!(
            (self.total - sum).abs() <= tol,
            "loss decomposition off by {:e}",
            (self.total - sum).abs()
        );
        Ok(())
    }
}

/// Renders entering the objective for one frame.
pub struct FrameRenders<'a> {
    pub full: &'a Image,
    pub static_only: Option<&'a Image>,
    pub dynamic_only: Option<&'a Image>,
}

/// Cotangents produced by [`total_loss`].
pub struct LossGrads {
    pub d_full: Image,
    pub d_static: Option<Image>,
    pub d_dynamic: Option<Image>,
    /// Direct gradient of the entropy term per `dyn_logit`.
    pub d_dyn_logit: Vec<f64>,
}

pub fn total_loss(
    set: &GaussianSet,
    target: &Image,
    renders: &FrameRenders<'_>,
    mask: Option<&Mask>,
    step: usize,
    config: &LossConfig,
) -> Result<(LossBreakdown, LossGrads)> {
    let (l1, mut d_full) = l1_loss_grad(renders.full, target)?;
    let mut l_recon = l1;
    if config.ssim_weight != 0.0 {
        let (ds, gs) = ssim_loss_grad(renders.full, target)?;
        l_recon += config.ssim_weight * ds;
        for (g, s) in d_full.data.iter_mut().zip(&gs.data) {
            *g += config.ssim_weight * s;
        }
    }

    let lambda = config.entropy_weight(step);
    let (l_bi, mut d_dyn_logit) = scene_entropy(set);
    d_dyn_logit.iter_mut().for_each(|g| *g *= lambda);

    let mut l_asg = 0.0;
    let (mut d_static, mut d_dynamic) = (None, None);
    if config.use_asg {
        let (Some(s), Some(d), Some(m)) = (renders.static_only, renders.dynamic_only, mask) else {
            return Err(crate::Error::Contract(
                "total_loss: supervision term needs static, dynamic renders and a mask".into(),
            ));
        };
        let (v, mut gs, mut gd) = asg_loss_grad(s, d, target, m)?;
        l_asg = config.asg_weight * v;
        if config.asg_weight != 1.0 {
            gs.data.iter_mut().for_each(|g| *g *= config.asg_weight);
            gd.data.iter_mut().for_each(|g| *g *= config.asg_weight);
        }
        d_static = Some(gs);
        d_dynamic = Some(gd);
    }

    let breakdown = LossBreakdown {
        l_recon,
        l_bi,
        lambda_bi: lambda,
        l_asg,
        total: l_recon + lambda * l_bi + l_asg,
    };
    Ok((
        breakdown,
        LossGrads {
            d_full,
            d_static,
            d_dynamic,
            d_dyn_logit,
        },
    ))
}
