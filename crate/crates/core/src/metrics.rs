//! Image quality and decoupling metrics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::decouple::{coeff_histogram, partition, render_split, PartitionMode};
use crate::error::{ensure_contract, Result};
use crate::image::{Image, Mask};
use crate::losses::ssim;
use crate::render::{render_subset, RenderSettings};
use crate::scene::{FrameSample, GaussianSet};
use crate::uncertainty::{residuals, FeatureExtractor, PatchStats, UncertaintyConfig, UncertaintyField};

pub const PSNR_CAP: f64 = 100.0;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// PSNR for images in [0, 1], capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
    Ok(psnr_from_mse(mse))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionPsnr {
    pub static_db: f64,
    pub dynamic_db: f64,
    pub full_db: f64,
}

/// PSNR over `mask == 0`, `mask == 1`, and all pixels. An empty region
/// scores the cap.
pub fn region_psnr(render: &Image, target: &Image, mask: &Mask) -> Result<RegionPsnr> {
    render.ensure_same_shape(target, "region_psnr")?;
    ensure_contract!(
        mask.width == render.width && mask.height == render.height,
        "region_psnr: mask shape differs from images"
    );
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for (p, &m) in mask.data.iter().enumerate() {
        let r = usize::from(m != 0);
        for c in 0..3 {
            sums[r] += (render.data[3 * p + c] - target.data[3 * p + c]).powi(2);
            counts[r] += 1;
        }
    }
    let region = |r: usize| if counts[r] == 0 { PSNR_CAP } else { psnr_from_mse(sums[r] / counts[r] as f64) };
    Ok(RegionPsnr {
        static_db: region(0),
        dynamic_db: region(1),
        full_db: psnr_from_mse((sums[0] + sums[1]) / (counts[0] + counts[1]).max(1) as f64),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecouplingScore {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Confusion-matrix rates with dynamic as the positive class and
/// `w >= tau` as the prediction. Empty denominators score 1.
pub fn decoupling_score(set: &GaussianSet, labels: &[u8], tau: f64) -> Result<DecouplingScore> {
    ensure_contract!(
        labels.len() == set.len(),
        "{} labels for {} primitives",
        labels.len(),
        set.len()
    );
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (p, &l) in set.primitives.iter().zip(labels) {
        match (p.dyn_coeff() >= tau, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok(DecouplingScore {
        accuracy: ratio(tp + tn, set.len()),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
    })
}

/// Labels for a learned scene: each primitive takes the label of the
/// ground-truth primitive whose canonical mean is nearest.
pub fn transfer_labels(learned: &GaussianSet, truth: &GaussianSet, truth_labels: &[u8]) -> Result<Vec<u8>> {
    ensure_contract!(truth.len() == truth_labels.len(), "truth labels do not match truth scene");
    ensure_contract!(!truth.is_empty() || learned.is_empty(), "cannot transfer labels from an empty scene");
    Ok(learned
        .primitives
        .iter()
        .map(|p| {
            let (best, _) = truth
                .primitives
                .iter()
                .enumerate()
                .map(|(i, q)| (i, (0..3).map(|a| (p.mu0[a] - q.mu0[a]).powi(2)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty truth");
            truth_labels[best]
        })
        .collect())
}

/// Uncertainty mask for one frame: the dynamic-only render is compared
/// with the target and a fresh field is fitted for `steps` steps.
pub fn frame_uncertainty_mask(
    dynamic_render: &Image,
    target: &Image,
    config: &UncertaintyConfig,
    steps: usize,
) -> Result<Mask> {
    let ex = PatchStats {
        patch: config.patch_size,
    };
    let r = residuals(&ex.extract(dynamic_render)?, &ex.extract(target)?)?;
    let mut field = UncertaintyField::new(target.width, target.height, config.patch_size, config.lambda_prior);
    field.fit(&r, steps, config.lr);
    Ok(field.make_mask(target.width, target.height))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tau_train: f64,
    pub tau_s: f64,
    pub tau_d: f64,
    pub settings_background: [f64; 3],
    pub uncertainty: UncertaintyConfig,
    /// Inner steps for the per-frame mask fit during evaluation.
    pub mask_fit_steps: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tau_train: 0.5,
            tau_s: 0.2,
            tau_d: 0.85,
            settings_background: [0.0; 3],
            uncertainty: UncertaintyConfig::default(),
            mask_fit_steps: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub psnr_db: Vec<f64>,
    pub psnr_mean: f64,
    pub ssim: Vec<f64>,
    pub ssim_mean: f64,
    pub region: Option<RegionPsnr>,
    pub decoupling: Option<DecouplingScore>,
    pub mask_iou: Option<f64>,
    pub gap_mass: f64,
    pub primitives: usize,
    pub dynamic_fraction: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frames            {}", self.frames)?;
        writeln!(f, "primitives        {}", self.primitives)?;
        writeln!(f, "psnr (dB)         {:.3}", self.psnr_mean)?;
        writeln!(f, "ssim              {:.4}", self.ssim_mean)?;
        if let Some(r) = &self.region {
            writeln!(
                f,
                "region psnr (dB)  static {:.3}  dynamic {:.3}  full {:.3}",
                r.static_db, r.dynamic_db, r.full_db
            )?;
        }
        if let Some(d) = &self.decoupling {
            writeln!(
                f,
                "decoupling        accuracy {:.4}  precision {:.4}  recall {:.4}",
                d.accuracy, d.precision, d.recall
            )?;
        }
        if let Some(iou) = self.mask_iou {
            writeln!(f, "mask iou          {iou:.4}")?;
        }
        writeln!(f, "dynamic fraction  {:.4}", self.dynamic_fraction)?;
        write!(f, "gap mass          {:.4}", self.gap_mass)
    }
}

/// Scores `set` on `frames`. Decoupling is reported when ground truth is
/// given; mask IoU when frames carry ground-truth masks.
pub fn evaluate(
    set: &GaussianSet,
    frames: &[FrameSample],
    truth: Option<(&GaussianSet, &[u8])>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let settings = RenderSettings {
        background: options.settings_background,
        ..Default::default()
    };
    let train_partition = partition(set, PartitionMode::Training, options.tau_train, options.tau_train)?;
    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    let mut ious = Vec::new();
    let mut regions = Vec::new();
    for frame in frames {
        frame.validate()?;
        let out = render_subset(set, &frame.camera, frame.t, None, &settings);
        psnrs.push(psnr(&out.image, &frame.image)?);
        ssims.push(ssim(&out.image, &frame.image)?);
        if let Some(gt) = &frame.gt_mask {
            regions.push(region_psnr(&out.image, &frame.image, gt)?);
            let (dynamic, _) = render_split(set, &frame.camera, frame.t, &train_partition, &settings)?;
            let mask = frame_uncertainty_mask(
                &dynamic.image,
                &frame.image,
                &options.uncertainty,
                options.mask_fit_steps,
            )?;
            ious.push(mask.iou(gt));
        }
    }
    let decoupling = match truth {
        Some((truth_set, labels)) => {
            let learned_labels = transfer_labels(set, truth_set, labels)?;
            Some(decoupling_score(set, &learned_labels, options.tau_train)?)
        }
        None => None,
    };
    let hist = coeff_histogram(set, 10, options.tau_s, options.tau_d)?;
    let region = (!regions.is_empty()).then(|| RegionPsnr {
        static_db: mean(&regions.iter().map(|r| r.static_db).collect::<Vec<_>>()),
        dynamic_db: mean(&regions.iter().map(|r| r.dynamic_db).collect::<Vec<_>>()),
        full_db: mean(&regions.iter().map(|r| r.full_db).collect::<Vec<_>>()),
    });
    Ok(EvalReport {
        frames: frames.len(),
        psnr_mean: mean(&psnrs),
        psnr_db: psnrs,
        ssim_mean: mean(&ssims),
        ssim: ssims,
        region,
        decoupling,
        mask_iou: (!ious.is_empty()).then(|| mean(&ious)),
        gap_mass: hist.gap_mass,
        primitives: set.len(),
        dynamic_fraction: if set.is_empty() {
            0.0
        } else {
            train_partition.dynamic_indices.len() as f64 / set.len() as f64
        },
    })
}
