//! Flat views of primitive parameters for optimizers and gradient checks.
//!
//! Gradients reuse [`GaussianPrimitive`] as their container: a gradient
//! has exactly the shape of the parameters it differentiates.

use crate::deform::DeformCoeffs;
use crate::scene::GaussianPrimitive;

/// Parameter groups, each with its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Mean,
    LogScale,
    Rotation,
    Color,
    Opacity,
    DynLogit,
    Deform,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Mean,
        ParamGroup::LogScale,
        ParamGroup::Rotation,
        ParamGroup::Color,
        ParamGroup::Opacity,
        ParamGroup::DynLogit,
        ParamGroup::Deform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Mean => "mu0",
            ParamGroup::LogScale => "log_scale",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Color => "color",
            ParamGroup::Opacity => "opacity_logit",
            ParamGroup::DynLogit => "dyn_logit",
            ParamGroup::Deform => "deform",
        }
    }
}

pub fn param_count(degree: usize) -> usize {
    15 + 9 * degree
}

/// Group of each flat slot, in [`flatten_into`] order.
pub fn layout(degree: usize) -> Vec<ParamGroup> {
    let mut out = Vec::with_capacity(param_count(degree));
    out.extend([ParamGroup::Mean; 3]);
    out.extend([ParamGroup::LogScale; 3]);
    out.extend([ParamGroup::Rotation; 4]);
    out.extend([ParamGroup::Color; 3]);
    out.push(ParamGroup::Opacity);
    out.push(ParamGroup::DynLogit);
    out.extend(std::iter::repeat_n(ParamGroup::Deform, 9 * degree));
    out
}

pub fn zeros_like(p: &GaussianPrimitive) -> GaussianPrimitive {
    GaussianPrimitive {
        mu0: [0.0; 3],
        log_scale: [0.0; 3],
        rotation: [0.0; 4],
        color: [0.0; 3],
        opacity_logit: 0.0,
        dyn_logit: 0.0,
        deform: DeformCoeffs::zeros(p.deform.degree),
    }
}

pub fn flatten_into(p: &GaussianPrimitive, out: &mut Vec<f64>) {
    out.extend_from_slice(&p.mu0);
    out.extend_from_slice(&p.log_scale);
    out.extend_from_slice(&p.rotation);
    out.extend_from_slice(&p.color);
    out.push(p.opacity_logit);
    out.push(p.dyn_logit);
    out.extend_from_slice(&p.deform.dmu);
    out.extend_from_slice(&p.deform.dlogs);
    out.extend_from_slice(&p.deform.drot);
}

pub fn flatten(p: &GaussianPrimitive) -> Vec<f64> {
    let mut v = Vec::with_capacity(param_count(p.deform.degree));
    flatten_into(p, &mut v);
    v
}

/// Writes `src` back into `p`; `src` must hold [`param_count`] values.
pub fn unflatten(p: &mut GaussianPrimitive, src: &[f64]) {
    let k = 3 * p.deform.degree;
    assert_eq!(src.len(), param_count(p.deform.degree));
    p.mu0.copy_from_slice(&src[0..3]);
    p.log_scale.copy_from_slice(&src[3..6]);
    p.rotation.copy_from_slice(&src[6..10]);
    p.color.copy_from_slice(&src[10..13]);
    p.opacity_logit = src[13];
    p.dyn_logit = src[14];
    p.deform.dmu.copy_from_slice(&src[15..15 + k]);
    p.deform.dlogs.copy_from_slice(&src[15 + k..15 + 2 * k]);
    p.deform.drot.copy_from_slice(&src[15 + 2 * k..15 + 3 * k]);
}

pub fn add_assign(acc: &mut GaussianPrimitive, g: &GaussianPrimitive) {
    for i in 0..3 {
        acc.mu0[i] += g.mu0[i];
        acc.log_scale[i] += g.log_scale[i];
        acc.color[i] += g.color[i];
    }
    for i in 0..4 {
        acc.rotation[i] += g.rotation[i];
    }
    acc.opacity_logit += g.opacity_logit;
    acc.dyn_logit += g.dyn_logit;
    for (a, b) in acc.deform.dmu.iter_mut().zip(&g.deform.dmu) {
        *a += b;
    }
    for (a, b) in acc.deform.dlogs.iter_mut().zip(&g.deform.dlogs) {
        *a += b;
    }
    for (a, b) in acc.deform.drot.iter_mut().zip(&g.deform.drot) {
        *a += b;
    }
}

/// Per-primitive gradients of a scalar objective.
pub type SceneGrad = Vec<GaussianPrimitive>;

pub fn zero_grad(set: &crate::scene::GaussianSet) -> SceneGrad {
    set.primitives.iter().map(zeros_like).collect()
}

pub fn accumulate(acc: &mut SceneGrad, g: &SceneGrad) {
    for (a, b) in acc.iter_mut().zip(g) {
        add_assign(a, b);
    }
}
