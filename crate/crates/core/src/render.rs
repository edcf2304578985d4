//! Forward splatting of time-deformed Gaussians and its exact adjoint.
//!
//! Primitives are deformed to time `t`, projected with the local affine
//! (EWA) approximation, globally depth-sorted (ties broken by index) and
//! alpha-blended front to back per pixel. Pixels are processed in 16×16
//! tiles; each tile keeps the global order of the primitives touching it, so
//! the result does not depend on the tiling or on the thread count.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::deform::{self, DeformedGaussian, Modulation};
use crate::error::{ensure_contract, Result};
use crate::image::Image;
use crate::math;
use crate::params::{self, SceneGrad};
use crate::scene::{Camera, GaussianPrimitive, GaussianSet};

/// Per-pixel contribution clamp.
pub const MAX_ALPHA: f64 = 0.99;
/// Contributions below this are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Accumulation stops once transmittance would fall below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Screen-space dilation added to every projected covariance (pixels²).
pub const DILATION: f64 = 0.3;
/// Viewport padding factor for center culling.
pub const VIEWPORT_PAD: f64 = 1.3;

const TILE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub modulation: Modulation,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            modulation: Modulation::Coefficient,
        }
    }
}

/// Screen-space footprint of one primitive.
#[derive(Clone, Debug)]
pub struct Projected2D {
    pub gaussian_index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    /// Camera-space z.
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Inclusive pixel bounds `[x0, x1] × [y0, y1]` outside of which the
    /// contribution is below [`MIN_ALPHA`]. Empty when `x0 > x1`.
    pub bounds: [i64; 4],
}

enum Projection {
    Visible(Projected2D),
    Culled,
    Degenerate,
}

/// Intermediate values of the projection reused by the adjoint.
struct ProjectionTape {
    deformed: DeformedGaussian,
    cam_point: Vector3<f64>,
    transform: Matrix2x3<f64>,
}

fn project_with_tape(
    index: usize,
    prim: &GaussianPrimitive,
    camera: &Camera,
    t: f64,
    modulation: Modulation,
) -> (Projection, Option<ProjectionTape>) {
    let deformed = deform::deformed_params(prim, t, modulation);
    let w_rot = camera.rotation();
    let p = w_rot * deformed.mean + camera.translation();
    let z = p.z;
    if !(z > camera.near && z < camera.far) {
        return (Projection::Culled, None);
    }
    let mean2d = Vector2::new(camera.fx * p.x / z + camera.cx, camera.fy * p.y / z + camera.cy);
    let (w, h) = (camera.width as f64, camera.height as f64);
    let pad_x = 0.5 * (VIEWPORT_PAD - 1.0) * w;
    let pad_y = 0.5 * (VIEWPORT_PAD - 1.0) * h;
    if mean2d.x < -pad_x || mean2d.x > w - 1.0 + pad_x || mean2d.y < -pad_y || mean2d.y > h - 1.0 + pad_y {
        return (Projection::Culled, None);
    }
    let jacobian = Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * p.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * p.y / (z * z),
    );
    let transform = jacobian * w_rot;
    let cov2d = transform * deformed.covariance * transform.transpose() + Matrix2::identity() * DILATION;
    let tape = ProjectionTape {
        deformed,
        cam_point: p,
        transform,
    };
    let Some(conic) = math::inverse_sym2(&cov2d) else {
        return (Projection::Degenerate, Some(tape));
    };
    let opacity = prim.opacity();
    let bounds = footprint_bounds(&mean2d, &cov2d, opacity, camera);
    (
        Projection::Visible(Projected2D {
            gaussian_index: index,
            mean2d,
            cov2d,
            conic,
            depth: z,
            opacity,
            color: prim.color,
            bounds,
        }),
        Some(tape),
    )
}

/// Pixel box containing every pixel where `opacity * exp(power) >= MIN_ALPHA`.
fn footprint_bounds(mean: &Vector2<f64>, cov: &Matrix2<f64>, opacity: f64, camera: &Camera) -> [i64; 4] {
    let level = opacity / MIN_ALPHA;
    if level < 1.0 {
        return [0, -1, 0, -1];
    }
    let r2 = 2.0 * level.ln();
    let ex = (r2 * cov[(0, 0)]).sqrt();
    let ey = (r2 * cov[(1, 1)]).sqrt();
    let x0 = ((mean.x - ex).floor() as i64 - 1).max(0);
    let x1 = ((mean.x + ex).ceil() as i64 + 1).min(camera.width as i64 - 1);
    let y0 = ((mean.y - ey).floor() as i64 - 1).max(0);
    let y1 = ((mean.y + ey).ceil() as i64 + 1).min(camera.height as i64 - 1);
    [x0, x1, y0, y1]
}

/// Projects one primitive at time `t`. `None` when culled or degenerate.
pub fn project(prim: &GaussianPrimitive, camera: &Camera, t: f64) -> Option<Projected2D> {
    project_with(prim, camera, t, Modulation::Coefficient)
}

pub fn project_with(
    prim: &GaussianPrimitive,
    camera: &Camera,
    t: f64,
    modulation: Modulation,
) -> Option<Projected2D> {
    match project_with_tape(0, prim, camera, t, modulation).0 {
        Projection::Visible(p) => Some(p),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    /// Position in [`RenderOutput::visible`].
    pub slot: u32,
    pub gaussian_index: u32,
    /// Clamped `opacity * density`.
    pub alpha: f64,
    /// Transmittance in front of this primitive.
    pub transmittance: f64,
}

impl Contribution {
    pub fn blend_weight(&self) -> f64 {
        self.alpha * self.transmittance
    }
}

/// Ordered front-to-back contributions of every pixel.
#[derive(Clone, Debug, Default)]
pub struct ContributionLog {
    offsets: Vec<usize>,
    entries: Vec<Contribution>,
}

impl ContributionLog {
    pub fn pixel(&self, p: usize) -> &[Contribution] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn total_entries(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderDiagnostics {
    pub culled: usize,
    pub degenerate: usize,
    pub filtered_out: usize,
    pub visible: usize,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    /// Row-major `H × W`.
    pub final_transmittance: Vec<f64>,
    pub contributions: ContributionLog,
    /// Visible primitives in blending order.
    pub visible: Vec<Projected2D>,
    pub camera: Camera,
    pub t: f64,
    pub settings: RenderSettings,
    pub diagnostics: RenderDiagnostics,
}

impl RenderOutput {
    /// Sum of blend weights at a pixel.
    pub fn weight_sum(&self, p: usize) -> f64 {
        self.contributions.pixel(p).iter().map(Contribution::blend_weight).sum()
    }
}

/// Renders the whole set at time `t`.
pub fn render(set: &GaussianSet, camera: &Camera, t: f64, subset_filter: Option<&dyn Fn(f64) -> bool>) -> RenderOutput {
    render_with(set, camera, t, subset_filter, &RenderSettings::default())
}

pub fn render_with(
    set: &GaussianSet,
    camera: &Camera,
    t: f64,
    subset_filter: Option<&dyn Fn(f64) -> bool>,
    settings: &RenderSettings,
) -> RenderOutput {
    let include: Option<Vec<bool>> =
        subset_filter.map(|f| set.primitives.iter().map(|p| f(p.dyn_coeff())).collect());
    render_subset(set, camera, t, include.as_deref(), settings)
}

/// Renders the primitives whose `include` flag is set (all when `None`).
pub fn render_subset(
    set: &GaussianSet,
    camera: &Camera,
    t: f64,
    include: Option<&[bool]>,
    settings: &RenderSettings,
) -> RenderOutput {
    let mut diagnostics = RenderDiagnostics::default();
    let mut visible = Vec::new();
    for (i, prim) in set.primitives.iter().enumerate() {
        if let Some(inc) = include {
            if !inc[i] {
                diagnostics.filtered_out += 1;
                continue;
            }
        }
        match project_with_tape(i, prim, camera, t, settings.modulation).0 {
            Projection::Visible(p) => visible.push(p),
            Projection::Culled => diagnostics.culled += 1,
            Projection::Degenerate => diagnostics.degenerate += 1,
        }
    }
    visible.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.gaussian_index.cmp(&b.gaussian_index))
    });
    diagnostics.visible = visible.len();

    let tiles = bin_tiles(&visible, camera);
    let tile_results: Vec<TileForward> = tiles
        .par_iter()
        .map(|tile| forward_tile(tile, &visible, settings))
        .collect();

    let (w, h) = (camera.width, camera.height);
    let mut image = Image::new(w, h);
    let mut final_transmittance = vec![0.0; w * h];
    let mut counts = vec![0usize; w * h];
    for (tile, res) in tiles.iter().zip(&tile_results) {
        for (k, (x, y)) in tile.pixels().enumerate() {
            let p = y * w + x;
            image.set_pixel(x, y, res.color[k]);
            final_transmittance[p] = res.transmittance[k];
            counts[p] = res.offsets[k + 1] - res.offsets[k];
        }
    }
    let mut offsets = Vec::with_capacity(w * h + 1);
    offsets.push(0);
    for c in &counts {
        offsets.push(offsets.last().unwrap() + c);
    }
    let mut entries = vec![
        Contribution {
            slot: 0,
            gaussian_index: 0,
            alpha: 0.0,
            transmittance: 0.0,
        };
        *offsets.last().unwrap()
    ];
    for (tile, res) in tiles.iter().zip(&tile_results) {
        for (k, (x, y)) in tile.pixels().enumerate() {
            let p = y * w + x;
            entries[offsets[p]..offsets[p + 1]].copy_from_slice(&res.entries[res.offsets[k]..res.offsets[k + 1]]);
        }
    }

    RenderOutput {
        image,
        final_transmittance,
        contributions: ContributionLog { offsets, entries },
        visible,
        camera: camera.clone(),
        t,
        settings: *settings,
        diagnostics,
    }
}

struct Tile {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    /// Slots into the visible list, in blending order.
    slots: Vec<u32>,
}

impl Tile {
    fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| (x, y)))
    }
}

fn bin_tiles(visible: &[Projected2D], camera: &Camera) -> Vec<Tile> {
    let tx = camera.width.div_ceil(TILE);
    let ty = camera.height.div_ceil(TILE);
    let mut tiles: Vec<Tile> = (0..ty)
        .flat_map(|j| {
            (0..tx).map(move |i| Tile {
                x0: i * TILE,
                x1: ((i + 1) * TILE).min(camera.width),
                y0: j * TILE,
                y1: ((j + 1) * TILE).min(camera.height),
                slots: Vec::new(),
            })
        })
        .collect();
    for (slot, g) in visible.iter().enumerate() {
        let [x0, x1, y0, y1] = g.bounds;
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for j in (y0 as usize / TILE)..=(y1 as usize / TILE) {
            for i in (x0 as usize / TILE)..=(x1 as usize / TILE) {
                tiles[j * tx + i].slots.push(slot as u32);
            }
        }
    }
    tiles
}

struct TileForward {
    color: Vec<[f64; 3]>,
    transmittance: Vec<f64>,
    offsets: Vec<usize>,
    entries: Vec<Contribution>,
}

#[inline]
fn density_power(g: &Projected2D, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - g.mean2d.x;
    let dy = py - g.mean2d.y;
    let k = &g.conic;
    let power = -0.5 * (k[(0, 0)] * dx * dx + 2.0 * k[(0, 1)] * dx * dy + k[(1, 1)] * dy * dy);
    (power, dx, dy)
}

fn forward_tile(tile: &Tile, visible: &[Projected2D], settings: &RenderSettings) -> TileForward {
    let n = (tile.x1 - tile.x0) * (tile.y1 - tile.y0);
    let mut out = TileForward {
        color: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n),
        offsets: Vec::with_capacity(n + 1),
        entries: Vec::new(),
    };
    out.offsets.push(0);
    for (x, y) in tile.pixels() {
        let (px, py) = (x as f64, y as f64);
        let mut t = 1.0;
        let mut c = [0.0; 3];
        for &slot in &tile.slots {
            let g = &visible[slot as usize];
            let [bx0, bx1, by0, by1] = g.bounds;
            let (xi, yi) = (x as i64, y as i64);
            if xi < bx0 || xi > bx1 || yi < by0 || yi > by1 {
                continue;
            }
            let (power, _, _) = density_power(g, px, py);
            if power > 0.0 {
                continue;
            }
            let alpha = (g.opacity * power.exp()).min(MAX_ALPHA);
            if alpha < MIN_ALPHA {
                continue;
            }
            let next = t * (1.0 - alpha);
            if next < MIN_TRANSMITTANCE {
                break;
            }
            let wgt = alpha * t;
            for ch in 0..3 {
                c[ch] += g.color[ch] * wgt;
            }
            out.entries.push(Contribution {
                slot,
                gaussian_index: g.gaussian_index as u32,
                alpha,
                transmittance: t,
            });
            t = next;
        }
        for ch in 0..3 {
            c[ch] += t * settings.background[ch];
        }
        out.color.push(c);
        out.transmittance.push(t);
        out.offsets.push(out.entries.len());
    }
    out
}

/// Screen-space cotangents of one visible primitive.
#[derive(Clone, Copy, Debug, Default)]
struct ScreenGrad {
    mean2d: Vector2<f64>,
    /// Cotangents of conic entries (00, 01 counted once per symmetric pair, 11).
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.mean2d += o.mean2d;
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
    }
}

/// Reverse-mode derivatives of a scalar loss through [`render_subset`].
///
/// `set` must be the set the output was rendered from. Returns one gradient
/// entry per primitive; primitives that did not contribute get zeros.
pub fn render_backward(set: &GaussianSet, output: &RenderOutput, d_image: &Image) -> Result<SceneGrad> {
    ensure_contract!(
        d_image.same_shape(&output.image),
        "render_backward: cotangent is {}x{} but render is {}x{}",
        d_image.width,
        d_image.height,
        output.image.width,
        output.image.height
    );
    let camera = &output.camera;
    let w = camera.width;
    let tiles = bin_tiles(&output.visible, camera);

    let tile_grads: Vec<Vec<(u32, ScreenGrad)>> = tiles
        .par_iter()
        .map(|tile| backward_tile(tile, output, d_image, w))
        .collect();

    let mut screen = vec![ScreenGrad::default(); output.visible.len()];
    for tg in &tile_grads {
        for (slot, g) in tg {
            screen[*slot as usize].add(g);
        }
    }

    let mut grads = params::zero_grad(set);
    for (g, sg) in output.visible.iter().zip(&screen) {
        let prim = &set.primitives[g.gaussian_index];
        let pg = primitive_backward(g, prim, sg, camera, output.t, output.settings.modulation);
        params::add_assign(&mut grads[g.gaussian_index], &pg);
    }
    Ok(grads)
}

fn backward_tile(tile: &Tile, output: &RenderOutput, d_image: &Image, width: usize) -> Vec<(u32, ScreenGrad)> {
    let mut local: Vec<ScreenGrad> = vec![ScreenGrad::default(); tile.slots.len()];
    // slot -> position within this tile's list
    let position = |slot: u32| tile.slots.binary_search(&slot).expect("slot binned in tile");
    let bg = output.settings.background;
    for (x, y) in tile.pixels() {
        let p = y * width + x;
        let contribs = output.contributions.pixel(p);
        if contribs.is_empty() {
            continue;
        }
        let dc = d_image.pixel(x, y);
        if dc == [0.0; 3] {
            continue;
        }
        let t_final = output.final_transmittance[p];
        let mut behind = [t_final * bg[0], t_final * bg[1], t_final * bg[2]];
        let (px, py) = (x as f64, y as f64);
        for c in contribs.iter().rev() {
            let g = &output.visible[c.slot as usize];
            let sg = &mut local[position(c.slot)];
            let wgt = c.alpha * c.transmittance;
            let mut d_alpha = 0.0;
            for ch in 0..3 {
                sg.color[ch] += wgt * dc[ch];
                d_alpha += dc[ch] * (g.color[ch] * c.transmittance - behind[ch] / (1.0 - c.alpha));
                behind[ch] += g.color[ch] * wgt;
            }
            let (power, dx, dy) = density_power(g, px, py);
            let density = power.exp();
            if g.opacity * density > MAX_ALPHA {
                continue;
            }
            sg.opacity += density * d_alpha;
            let d_power = g.opacity * density * d_alpha;
            let k = &g.conic;
            sg.conic[0] += -0.5 * dx * dx * d_power;
            sg.conic[1] += -dx * dy * d_power;
            sg.conic[2] += -0.5 * dy * dy * d_power;
            // power depends on (pixel - mean)
            sg.mean2d.x += (k[(0, 0)] * dx + k[(0, 1)] * dy) * d_power;
            sg.mean2d.y += (k[(0, 1)] * dx + k[(1, 1)] * dy) * d_power;
        }
    }
    tile.slots.iter().copied().zip(local).collect()
}

fn primitive_backward(
    g: &Projected2D,
    prim: &GaussianPrimitive,
    sg: &ScreenGrad,
    camera: &Camera,
    t: f64,
    modulation: Modulation,
) -> GaussianPrimitive {
    let (_, tape) = project_with_tape(g.gaussian_index, prim, camera, t, modulation);
    let tape = tape.expect("visible primitive has a tape");
    let k = &g.conic;
    let d_conic = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let d_cov2d = -(k * d_conic * k);

    let cov3 = &tape.deformed.covariance;
    let tr = &tape.transform;
    let d_cov3: Matrix3<f64> = tr.transpose() * d_cov2d * tr;
    let d_transform: Matrix2x3<f64> = (d_cov2d + d_cov2d.transpose()) * tr * cov3;
    let w_rot = camera.rotation();
    let d_jac: Matrix2x3<f64> = d_transform * w_rot.transpose();

    let p = &tape.cam_point;
    let (fx, fy) = (camera.fx, camera.fy);
    let (x, y, z) = (p.x, p.y, p.z);
    let (z2, z3) = (z * z, z * z * z);
    let dm = sg.mean2d;
    let mut d_p = Vector3::new(
        dm.x * fx / z,
        dm.y * fy / z,
        -dm.x * fx * x / z2 - dm.y * fy * y / z2,
    );
    d_p.x += d_jac[(0, 2)] * (-fx / z2);
    d_p.y += d_jac[(1, 2)] * (-fy / z2);
    d_p.z += d_jac[(0, 0)] * (-fx / z2)
        + d_jac[(0, 2)] * (2.0 * fx * x / z3)
        + d_jac[(1, 1)] * (-fy / z2)
        + d_jac[(1, 2)] * (2.0 * fy * y / z3);
    let d_mean3 = w_rot.transpose() * d_p;

    let geo = deform::deformed_params_backward(
        &tape.deformed,
        t,
        modulation,
        prim.deform.degree,
        &d_mean3,
        &d_cov3,
    );
    let op = g.opacity;
    GaussianPrimitive {
        mu0: geo.mu0.into(),
        log_scale: geo.log_scale.into(),
        rotation: geo.rotation,
        color: sg.color,
        opacity_logit: sg.opacity * op * (1.0 - op),
        dyn_logit: geo.dyn_logit,
        deform: geo.deform,
    }
}
