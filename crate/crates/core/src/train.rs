//! Optimization loop, checkpoints, and the ablation switchboard.
//!
//! Each step draws one training frame (a seeded per-epoch shuffle), renders
//! the full scene and, when supervision is on, the dynamic-only and
//! static-only splits. The per-frame uncertainty field is refitted on the
//! dynamic-only render against the target and thresholded into the mask
//! that routes the supervision term. Gradients of all terms are summed and
//! applied with Adam.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decouple::{partition, render_split, PartitionMode};
use crate::deform::{Modulation, DEFAULT_DEGREE};
use crate::error::{ensure_contract, Error, Result};
use crate::image::Mask;
use crate::losses::{total_loss, FrameRenders, LossBreakdown, LossConfig};
use crate::metrics::{evaluate, psnr, EvalOptions};
use crate::params::{self, ParamGroup, SceneGrad};
use crate::render::{render_backward, render_subset, RenderOutput, RenderSettings};
use crate::scene::{BoxInit, FrameSample, GaussianSet};
use crate::synth::Dataset;
use crate::uncertainty::{FeatureExtractor, FeatureGrid, PatchStats, UncertaintyConfig, UncertaintyField};

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"SDDCKPTv1\n";
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Opacity and dynamic logits are kept in `[-LOGIT_LIMIT, LOGIT_LIMIT]`,
/// where the sigmoid is still strictly inside (0, 1) in `f64`.
pub const LOGIT_LIMIT: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub mean: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub color: f64,
    pub opacity: f64,
    pub dyn_logit: f64,
    pub deform: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mean: 1.6e-4,
            log_scale: 5e-3,
            rotation: 1e-3,
            color: 2.5e-3,
            opacity: 5e-2,
            dyn_logit: 5e-2,
            deform: 1.6e-4,
        }
    }
}

impl LearningRates {
    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Mean => self.mean,
            ParamGroup::LogScale => self.log_scale,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Color => self.color,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::DynLogit => self.dyn_logit,
            ParamGroup::Deform => self.deform,
        }
    }
}

/// Rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    A,
    B,
    C,
    D,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::A, Ablation::B, Ablation::C, Ablation::D, Ablation::Full];

    pub fn id(self) -> &'static str {
        match self {
            Ablation::A => "a",
            Ablation::B => "b",
            Ablation::C => "c",
            Ablation::D => "d",
            Ablation::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.id().eq_ignore_ascii_case(s))
    }

    /// `(use_w, use_lbi, use_schedule, use_asg)`
    pub fn flags(self) -> (bool, bool, bool, bool) {
        match self {
            Ablation::A => (false, false, false, false),
            Ablation::B => (true, false, false, false),
            Ablation::C => (true, true, false, false),
            Ablation::D => (true, true, true, false),
            Ablation::Full => (true, true, true, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub schedule_rate: f64,
    pub tau_train: f64,
    pub tau_d_inf: f64,
    pub tau_s_inf: f64,
    pub lr: LearningRates,
    pub ssim_weight: f64,
    pub asg_weight: f64,
    pub lambda_prior: f64,
    pub patch_size: usize,
    pub sigma_steps: usize,
    pub sigma_lr: f64,
    pub prune_opacity: f64,
    /// 0 disables pruning.
    pub prune_interval: usize,
    pub seed: u64,
    pub use_w: bool,
    pub use_lbi: bool,
    pub use_schedule: bool,
    pub use_asg: bool,
    /// Primitives seeded uniformly in the bounds when training starts from
    /// scratch.
    pub init_count: usize,
    pub init_bounds_min: [f64; 3],
    pub init_bounds_max: [f64; 3],
    pub deform_degree: usize,
    pub background: [f64; 3],
    /// Every `holdout_every`-th timestamp is held out for evaluation.
    pub holdout_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            schedule_rate: 1e-4,
            tau_train: 0.5,
            tau_d_inf: 0.85,
            tau_s_inf: 0.2,
            lr: LearningRates::default(),
            ssim_weight: 0.2,
            asg_weight: 1.0,
            lambda_prior: 0.5,
            patch_size: 8,
            sigma_steps: 20,
            sigma_lr: 0.1,
            prune_opacity: 0.01,
            prune_interval: 500,
            seed: 0,
            use_w: true,
            use_lbi: true,
            use_schedule: true,
            use_asg: true,
            init_count: 100,
            init_bounds_min: [-1.0; 3],
            init_bounds_max: [1.0; 3],
            deform_degree: DEFAULT_DEGREE,
            background: [0.0; 3],
            holdout_every: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.lr;
        ensure_contract!(
            ParamGroup::ALL.iter().all(|&g| lr.get(g) > 0.0) && self.sigma_lr > 0.0 && self.schedule_rate > 0.0,
            "learning and schedule rates must be positive"
        );
        ensure_contract!(!self.use_lbi || self.use_w, "use_lbi requires use_w");
        ensure_contract!(!self.use_schedule || self.use_lbi, "use_schedule requires use_lbi");
        ensure_contract!(!self.use_asg || self.use_w, "use_asg requires use_w");
        ensure_contract!(
            (0.0..=1.0).contains(&self.tau_train)
                && (0.0..=1.0).contains(&self.tau_s_inf)
                && self.tau_s_inf <= self.tau_d_inf
                && self.tau_d_inf <= 1.0,
            "thresholds must satisfy 0 <= tau_s <= tau_d <= 1"
        );
        ensure_contract!(self.patch_size > 0, "patch_size must be positive");
        ensure_contract!(self.lambda_prior > 0.0, "lambda_prior must be positive");
        ensure_contract!(
            self.ssim_weight >= 0.0 && self.asg_weight >= 0.0,
            "loss weights must be non-negative"
        );
        Ok(())
    }

    pub fn with_ablation(mut self, row: Ablation) -> Self {
        (self.use_w, self.use_lbi, self.use_schedule, self.use_asg) = row.flags();
        self
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            ssim_weight: self.ssim_weight,
            schedule_rate: self.schedule_rate,
            use_lbi: self.use_lbi,
            use_schedule: self.use_schedule,
            use_asg: self.use_asg,
            asg_weight: self.asg_weight,
        }
    }

    pub fn uncertainty(&self) -> UncertaintyConfig {
        UncertaintyConfig {
            patch_size: self.patch_size,
            lambda_prior: self.lambda_prior,
            inner_steps: self.sigma_steps,
            lr: self.sigma_lr,
        }
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            background: self.background,
            modulation: if self.use_w {
                Modulation::Coefficient
            } else {
                Modulation::Unit
            },
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            tau_train: self.tau_train,
            tau_s: self.tau_s_inf,
            tau_d: self.tau_d_inf,
            settings_background: self.background,
            uncertainty: self.uncertainty(),
            ..Default::default()
        }
    }

    /// Box-seeded starting scene.
    pub fn initial_scene(&self) -> GaussianSet {
        let mut init = BoxInit::new(self.init_count, self.init_bounds_min, self.init_bounds_max);
        init.degree = self.deform_degree;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        GaussianSet::init_in_box(&init, &mut rng)
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let (line, col) = e
                .span()
                .map(|s| line_col(text, s.start))
                .unwrap_or((0, 0));
            Error::parse(path, line, col, e.message().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub l_recon: f64,
    pub l_bi: f64,
    pub lambda_bi: f64,
    pub l_asg: f64,
    pub total: f64,
    pub psnr_train: f64,
}

impl LogEntry {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log entry serializes")
    }
}

/// First and second moments, laid out like [`params::flatten`] per primitive.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_digest: String,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub scene: GaussianSet,
    pub adam: AdamState,
    /// Per training frame; `None` until the frame is first visited.
    pub fields: Vec<Option<UncertaintyField>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    config_digest: String,
    step: usize,
    scene: GaussianSet,
    fields: Vec<Option<UncertaintyField>>,
    moments: usize,
}

impl Checkpoint {
    /// `SDDCKPTv1\n`, a `u64` JSON length, the JSON header, then the
    /// first and second moments as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            config_digest: self.config_digest.clone(),
            step: self.step,
            scene: self.scene.clone(),
            fields: self.fields.clone(),
            moments: self.adam.m.len(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint serializes");
        let mut out = Vec::with_capacity(18 + json.len() + 16 * self.adam.m.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.adam.m.iter().chain(&self.adam.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if !is_checkpoint(bytes) {
            return Err(Error::parse(path, 1, 1, "missing SDDCKPTv1 header"));
        }
        let body = &bytes[CHECKPOINT_MAGIC.len()..];
        ensure_parse(body.len() >= 8, path, "truncated checkpoint")?;
        let n = u64::from_le_bytes(body[..8].try_into().unwrap()) as usize;
        ensure_parse(body.len() >= 8 + n, path, "truncated checkpoint header")?;
        let header: CheckpointHeader =
            serde_json::from_slice(&body[8..8 + n]).map_err(|e| Error::from_json(path, e))?;
        let raw = &body[8 + n..];
        ensure_parse(
            raw.len() == 16 * header.moments,
            path,
            "moment arrays do not match their declared length",
        )?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (m, v) = vals.split_at(header.moments);
        Ok(Self {
            config: header.config,
            config_digest: header.config_digest,
            step: header.step,
            scene: header.scene,
            adam: AdamState {
                m: m.to_vec(),
                v: v.to_vec(),
            },
            fields: header.fields,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn ensure_parse(cond: bool, path: &Path, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::parse(path, 0, 0, msg))
    }
}

pub fn is_checkpoint(bytes: &[u8]) -> bool {
    bytes.starts_with(CHECKPOINT_MAGIC)
}

/// Loads a scene from either a checkpoint or a scene document.
pub fn load_any_scene(path: impl AsRef<Path>) -> Result<GaussianSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_checkpoint(&bytes) {
        return Ok(Checkpoint::from_bytes(&bytes, path)?.scene);
    }
    let text = String::from_utf8(bytes).map_err(|e| Error::parse(path, 0, 0, e.to_string()))?;
    Ok(GaussianSet::from_json(&text, path)?.0)
}

/// Renders for one objective evaluation.
pub struct StepRenders {
    pub full: RenderOutput,
    pub split: Option<(RenderOutput, RenderOutput)>,
}

/// Value and gradient of the total objective for one frame with a fixed
/// mask. `step` only feeds the entropy schedule.
pub fn objective(
    set: &GaussianSet,
    frame: &FrameSample,
    mask: Option<&Mask>,
    step: usize,
    config: &TrainConfig,
) -> Result<(LossBreakdown, SceneGrad, StepRenders)> {
    let settings = config.render_settings();
    let full = render_subset(set, &frame.camera, frame.t, None, &settings);
    let split = if config.use_asg {
        let part = partition(set, PartitionMode::Training, config.tau_train, config.tau_train)?;
        Some(render_split(set, &frame.camera, frame.t, &part, &settings)?)
    } else {
        None
    };
    objective_with(set, frame, mask, step, config, StepRenders { full, split })
}

fn objective_with(
    set: &GaussianSet,
    frame: &FrameSample,
    mask: Option<&Mask>,
    step: usize,
    config: &TrainConfig,
    renders: StepRenders,
) -> Result<(LossBreakdown, SceneGrad, StepRenders)> {
    let loss_cfg = config.loss_config();
    let frame_renders = FrameRenders {
        full: &renders.full.image,
        dynamic_only: renders.split.as_ref().map(|s| &s.0.image),
        static_only: renders.split.as_ref().map(|s| &s.1.image),
    };
    let (breakdown, grads) = total_loss(set, &frame.image, &frame_renders, mask, step, &loss_cfg)?;
    let mut g = render_backward(set, &renders.full, &grads.d_full)?;
    if let (Some((dyn_out, stat_out)), Some(dd), Some(ds)) = (&renders.split, &grads.d_dynamic, &grads.d_static) {
        params::accumulate(&mut g, &render_backward(set, dyn_out, dd)?);
        params::accumulate(&mut g, &render_backward(set, stat_out, ds)?);
    }
    for (gi, d) in g.iter_mut().zip(&grads.d_dyn_logit) {
        gi.dyn_logit += d;
    }
    if !config.use_w {
        g.iter_mut().for_each(|gi| gi.dyn_logit = 0.0);
    }
    Ok((breakdown, g, renders))
}

fn check_finite(b: &LossBreakdown, step: usize) -> Result<()> {
    for (name, v) in [
        ("l_recon", b.l_recon),
        ("l_bi", b.l_bi),
        ("l_asg", b.l_asg),
        ("total", b.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step,
                term: name.into(),
            });
        }
    }
    Ok(())
}

fn check_grad_finite(g: &SceneGrad, step: usize, degree: usize) -> Result<()> {
    let layout = params::layout(degree);
    let mut buf = Vec::new();
    for p in g {
        buf.clear();
        params::flatten_into(p, &mut buf);
        if let Some(i) = buf.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step,
                term: format!("gradient of {}", layout[i].name()),
            });
        }
    }
    Ok(())
}

/// Mutable optimization state over a fixed list of training frames.
pub struct Trainer<'a> {
    frames: &'a [FrameSample],
    config: TrainConfig,
    set: GaussianSet,
    adam: AdamState,
    step: usize,
    fields: Vec<Option<UncertaintyField>>,
    target_features: Vec<Option<FeatureGrid>>,
    slot_lr: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(frames: &'a [FrameSample], initial: GaussianSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        ensure_contract!(!frames.is_empty(), "training needs at least one frame");
        for f in frames {
            f.validate()?;
        }
        let degree = initial.primitives.first().map_or(config.deform_degree, |p| p.deform.degree);
        ensure_contract!(
            initial.primitives.iter().all(|p| p.deform.degree == degree && p.deform.is_consistent()),
            "all primitives must share one deformation degree"
        );
        let n = initial.len() * params::param_count(degree);
        let slot_lr = params::layout(degree).into_iter().map(|g| config.lr.get(g)).collect();
        Ok(Self {
            frames,
            adam: AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
            set: initial,
            step: 0,
            fields: vec![None; frames.len()],
            target_features: vec![None; frames.len()],
            slot_lr,
            config,
        })
    }

    /// Continues from a checkpoint. `config` may change `steps`; every
    /// other field must match the checkpoint.
    pub fn resume(frames: &'a [FrameSample], ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        let mut probe = config.clone();
        probe.steps = ckpt.config.steps;
        ensure_contract!(
            probe == ckpt.config,
            "resume config differs from the checkpoint's beyond `steps`"
        );
        ensure_contract!(
            ckpt.fields.len() == frames.len(),
            "checkpoint was trained on {} frames, got {}",
            ckpt.fields.len(),
            frames.len()
        );
        let mut t = Self::new(frames, ckpt.scene, config)?;
        ensure_contract!(
            ckpt.adam.m.len() == t.adam.m.len() && ckpt.adam.v.len() == t.adam.v.len(),
            "checkpoint moments do not match the scene"
        );
        t.adam = ckpt.adam;
        t.step = ckpt.step;
        t.fields = ckpt.fields;
        Ok(t)
    }

    pub fn scene(&self) -> &GaussianSet {
        &self.set
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            config_digest: self.config.digest(),
            step: self.step,
            scene: self.set.clone(),
            adam: self.adam.clone(),
            fields: self.fields.clone(),
        }
    }

    /// Frame visited at `step`: a shuffle of all frames per epoch, seeded
    /// by `(seed, epoch)`.
    pub fn frame_for_step(&self, step: usize) -> usize {
        let n = self.frames.len();
        let epoch = (step / n) as u64;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch);
        order.shuffle(&mut rng);
        order[step % n]
    }

    fn mask_for(&mut self, fi: usize, dynamic_render: &RenderOutput) -> Result<Mask> {
        let frame = &self.frames[fi];
        let ucfg = self.config.uncertainty();
        let ex = PatchStats {
            patch: ucfg.patch_size,
        };
        if self.target_features[fi].is_none() {
            self.target_features[fi] = Some(ex.extract(&frame.image)?);
        }
        let field = self.fields[fi].get_or_insert_with(|| {
            UncertaintyField::new(frame.image.width, frame.image.height, ucfg.patch_size, ucfg.lambda_prior)
        });
        let feat_r = ex.extract(&dynamic_render.image)?;
        field.update(&feat_r, self.target_features[fi].as_ref().unwrap(), ucfg.inner_steps, ucfg.lr)?;
        Ok(field.make_mask(frame.image.width, frame.image.height))
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<LogEntry> {
        let step = self.step;
        let fi = self.frame_for_step(step);
        let frame = &self.frames[fi];
        let settings = self.config.render_settings();
        let full = render_subset(&self.set, &frame.camera, frame.t, None, &settings);
        let (split, mask) = if self.config.use_asg {
            let tau = self.config.tau_train;
            let part = partition(&self.set, PartitionMode::Training, tau, tau)?;
            let (d, s) = render_split(&self.set, &frame.camera, frame.t, &part, &settings)?;
            let mask = self.mask_for(fi, &d)?;
            (Some((d, s)), Some(mask))
        } else {
            (None, None)
        };
        let frame = &self.frames[fi];
        let (breakdown, grads, renders) =
            objective_with(&self.set, frame, mask.as_ref(), step, &self.config, StepRenders { full, split })?;
        check_finite(&breakdown, step)?;
        breakdown.check(1e-7)?;
        let degree = self.set.primitives.first().map_or(self.config.deform_degree, |p| p.deform.degree);
        check_grad_finite(&grads, step, degree)?;
        let psnr_train = psnr(&renders.full.image, &frame.image)?;

        self.apply_adam(&grads);
        self.step += 1;
        if self.config.prune_interval > 0 && self.step % self.config.prune_interval == 0 {
            self.prune();
        }
        Ok(LogEntry {
            step,
            l_recon: breakdown.l_recon,
            l_bi: breakdown.l_bi,
            lambda_bi: breakdown.lambda_bi,
            l_asg: breakdown.l_asg,
            total: breakdown.total,
            psnr_train,
        })
    }

    fn apply_adam(&mut self, grads: &SceneGrad) {
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let k = self.slot_lr.len();
        let mut theta = Vec::with_capacity(k);
        let mut g = Vec::with_capacity(k);
        for (i, (prim, grad)) in self.set.primitives.iter_mut().zip(grads).enumerate() {
            theta.clear();
            g.clear();
            params::flatten_into(prim, &mut theta);
            params::flatten_into(grad, &mut g);
            let m = &mut self.adam.m[i * k..(i + 1) * k];
            let v = &mut self.adam.v[i * k..(i + 1) * k];
            for j in 0..k {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta[j] -= self.slot_lr[j] * mhat / (vhat.sqrt() + ADAM_EPS);
            }
            params::unflatten(prim, &theta);
            prim.normalize_rotation();
            prim.opacity_logit = prim.opacity_logit.clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
            prim.dyn_logit = prim.dyn_logit.clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
        }
    }

    /// Drops primitives whose opacity fell below `prune_opacity`.
    pub fn prune(&mut self) -> usize {
        let keep: Vec<bool> = self
            .set
            .primitives
            .iter()
            .map(|p| p.opacity() >= self.config.prune_opacity)
            .collect();
        let removed = keep.iter().filter(|k| !**k).count();
        if removed == 0 {
            return 0;
        }
        let k = self.slot_lr.len();
        let filter = |src: &[f64]| -> Vec<f64> {
            src.chunks_exact(k)
                .zip(&keep)
                .filter(|(_, &kp)| kp)
                .flat_map(|(c, _)| c.iter().copied())
                .collect()
        };
        self.adam.m = filter(&self.adam.m);
        self.adam.v = filter(&self.adam.v);
        self.set = self.set.filtered(&keep);
        removed
    }

    /// Steps until `config.steps` optimizer steps have been taken, passing
    /// each log entry to `log`.
    pub fn run(&mut self, mut log: impl FnMut(&LogEntry) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let entry = self.step()?;
            log(&entry)?;
        }
        Ok(())
    }
}

/// Trains from `initial` and returns the final checkpoint.
pub fn train(
    frames: &[FrameSample],
    initial: GaussianSet,
    config: &TrainConfig,
    log: impl FnMut(&LogEntry) -> Result<()>,
) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(frames, initial, config.clone())?;
    trainer.run(log)?;
    Ok(trainer.checkpoint())
}

/// Writes log entries as JSON lines.
pub fn log_writer(path: impl AsRef<Path>) -> Result<impl FnMut(&LogEntry) -> Result<()>> {
    let path = path.as_ref().to_path_buf();
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    Ok(move |e: &LogEntry| {
        writeln!(w, "{}", e.to_json())
            .and_then(|_| if e.step % 256 == 0 { w.flush() } else { Ok(()) })
            .map_err(|err| Error::io(&path, err))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub steps: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, id: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.config_id == id.id())
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "config  w  L_bi  sched  L_asg   PSNR     SSIM")?;
        for r in &self.rows {
            let row = Ablation::parse(&r.config_id).expect("known row");
            let (w, bi, s, asg) = row.flags();
            let mark = |b: bool| if b { "x" } else { "-" };
            writeln!(
                f,
                "{:<6}  {}  {}     {}      {}      {:>7.3}  {:.4}",
                r.config_id,
                mark(w),
                mark(bi),
                mark(s),
                mark(asg),
                r.psnr,
                r.ssim
            )?;
        }
        write!(f, "seed {}  steps {}", self.seed, self.steps)
    }
}

/// Trains one ablation row on the dataset's training split and evaluates
/// it on the held-out split.
pub fn train_and_evaluate(
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(Checkpoint, crate::metrics::EvalReport)> {
    let (train_idx, held_idx) = dataset.holdout_split(config.holdout_every);
    let train_frames: Vec<FrameSample> = train_idx.iter().map(|&i| dataset.frames[i].clone()).collect();
    let held: Vec<FrameSample> = held_idx.iter().map(|&i| dataset.frames[i].clone()).collect();
    let eval_frames = if held.is_empty() { &train_frames } else { &held };
    let ckpt = train(&train_frames, config.initial_scene(), config, |_| Ok(()))?;
    let truth = match (&dataset.truth, &dataset.labels) {
        (Some(t), Some(l)) => Some((t, l.as_slice())),
        _ => None,
    };
    let report = evaluate(&ckpt.scene, eval_frames, truth, &config.eval_options())?;
    Ok((ckpt, report))
}

pub fn run_ablation(dataset: &Dataset, base: &TrainConfig) -> Result<AblationTable> {
    let rows = Ablation::ALL
        .iter()
        .map(|&row| {
            let cfg = base.clone().with_ablation(row);
            let (_, report) = train_and_evaluate(dataset, &cfg)?;
            Ok(AblationRow {
                config_id: row.id().to_string(),
                psnr: report.psnr_mean,
                ssim: report.ssim_mean,
                accuracy: report.decoupling.map(|d| d.accuracy),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        seed: base.seed,
        steps: base.steps,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_flags() {
        assert_eq!(Ablation::A.flags(), (false, false, false, false));
        assert_eq!(Ablation::B.flags(), (true, false, false, false));
        assert_eq!(Ablation::C.flags(), (true, true, false, false));
        assert_eq!(Ablation::Full.flags(), (true, true, true, true));
        for row in Ablation::ALL {
            TrainConfig::default().with_ablation(row).validate().unwrap();
        }
    }

    #[test]
    fn prerequisites_enforced() {
        let cfg = TrainConfig {
            use_w: false,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            use_schedule: true,
            use_lbi: false,
            use_asg: false,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip_and_unknown_keys() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml();
        assert_eq!(TrainConfig::from_toml(&text, Path::new("c.toml")).unwrap(), cfg);
        let err = TrainConfig::from_toml("steps = 5\nbogus = 1\n", Path::new("c.toml")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
