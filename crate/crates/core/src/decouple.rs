//! Threshold partition of a scene into dynamic and static primitives.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Result};
use crate::render::{render_subset, RenderOutput, RenderSettings};
use crate::scene::{Camera, GaussianSet};

pub const TRAINING_TAU: f64 = 0.5;
pub const INFERENCE_TAU_D: f64 = 0.85;
pub const INFERENCE_TAU_S: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Exhaustive split at a single threshold; ties go to dynamic.
    Training,
    /// Strict thresholds; primitives in the gap stay unassigned.
    Inference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub dynamic_indices: Vec<usize>,
    pub static_indices: Vec<usize>,
    pub unassigned_indices: Vec<usize>,
    pub tau_d: f64,
    pub tau_s: f64,
    pub mode: PartitionMode,
}

impl Partition {
    fn flags(&self, n: usize, indices: &[usize]) -> Vec<bool> {
        let mut f = vec![false; n];
        indices.iter().for_each(|&i| f[i] = true);
        f
    }

    pub fn dynamic_flags(&self, n: usize) -> Vec<bool> {
        self.flags(n, &self.dynamic_indices)
    }

    pub fn static_flags(&self, n: usize) -> Vec<bool> {
        self.flags(n, &self.static_indices)
    }

    pub fn len(&self) -> usize {
        self.dynamic_indices.len() + self.static_indices.len() + self.unassigned_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits by dynamic coefficient. Training mode requires `tau_d == tau_s`.
pub fn partition(set: &GaussianSet, mode: PartitionMode, tau_d: f64, tau_s: f64) -> Result<Partition> {
    ensure_contract!(
        (0.0..=1.0).contains(&tau_s) && (0.0..=1.0).contains(&tau_d),
        "thresholds must lie in [0, 1] (tau_s = {tau_s}, tau_d = {tau_d})"
    );
    ensure_contract!(tau_s <= tau_d, "tau_s = {tau_s} exceeds tau_d = {tau_d}");
    ensure_contract!(
        mode == PartitionMode::Inference || tau_s == tau_d,
        "training mode uses one threshold (got tau_d = {tau_d}, tau_s = {tau_s})"
    );
    let ws: Vec<f64> = set.primitives.iter().map(|p| p.dyn_coeff()).collect();
    Ok(partition_weights(&ws, mode, tau_d, tau_s))
}

pub(crate) fn partition_weights(ws: &[f64], mode: PartitionMode, tau_d: f64, tau_s: f64) -> Partition {
    let mut p = Partition {
        dynamic_indices: Vec::new(),
        static_indices: Vec::new(),
        unassigned_indices: Vec::new(),
        tau_d,
        tau_s,
        mode,
    };
    for (i, &w) in ws.iter().enumerate() {
        let bucket = match mode {
            PartitionMode::Training if w >= tau_d => &mut p.dynamic_indices,
            PartitionMode::Training => &mut p.static_indices,
            PartitionMode::Inference if w > tau_d => &mut p.dynamic_indices,
            PartitionMode::Inference if w < tau_s => &mut p.static_indices,
            PartitionMode::Inference => &mut p.unassigned_indices,
        };
        bucket.push(i);
    }
    p
}

/// Dynamic-only and static-only renders, in that order.
pub fn render_split(
    set: &GaussianSet,
    camera: &Camera,
    t: f64,
    partition: &Partition,
    settings: &RenderSettings,
) -> Result<(RenderOutput, RenderOutput)> {
    ensure_contract!(
        partition.len() == set.len(),
        "partition covers {} primitives, scene has {}",
        partition.len(),
        set.len()
    );
    let n = set.len();
    let dynamic = render_subset(set, camera, t, Some(&partition.dynamic_flags(n)), settings);
    let static_ = render_subset(set, camera, t, Some(&partition.static_flags(n)), settings);
    Ok((dynamic, static_))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Fraction of primitives with `tau_s < w <= tau_d`.
    pub gap_mass: f64,
}

/// Histogram of dynamic coefficients over `bins` uniform bins of [0, 1].
/// Values within 1e-9 below an edge are counted in the upper bin.
pub fn coeff_histogram(set: &GaussianSet, bins: usize, tau_s: f64, tau_d: f64) -> Result<Histogram> {
    ensure_contract!(bins >= 2, "histogram needs at least 2 bins, got {bins}");
    let mut counts = vec![0usize; bins];
    let mut gap = 0usize;
    for p in &set.primitives {
        let w = p.dyn_coeff();
        let b = ((w * bins as f64 + 1e-9).floor() as usize).min(bins - 1);
        counts[b] += 1;
        if w > tau_s && w <= tau_d {
            gap += 1;
        }
    }
    Ok(Histogram {
        bin_edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        counts,
        gap_mass: if set.is_empty() { 0.0 } else { gap as f64 / set.len() as f64 },
    })
}
