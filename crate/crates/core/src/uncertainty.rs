//! Per-patch uncertainty and the binary motion mask derived from it.
//!
//! Each patch carries `sigma = exp(log_sigma)`. Given the feature residual
//! `r = min(1, 2 - 2 cos(f_render, f_target))` the patch loss is
//! `r / (2 sigma^2) + lambda_prior * ln sigma`, minimized at
//! `sigma^2 = r / lambda_prior`. A patch is marked (`m = 1`) when
//! `sigma^2 < 1/2`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Error, Result};
use crate::image::{Image, Mask};

pub const FEATURE_MAGIC: &[u8; 9] = b"SDDFEATv1";
const LOG_SIGMA_LIMIT: f64 = 7.0;

/// Patch features laid out row-major as `[ph][pw][dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub ph: usize,
    pub pw: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn num_patches(&self) -> usize {
        self.ph * self.pw
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(21 + 4 * self.data.len());
        bytes.extend_from_slice(FEATURE_MAGIC);
        for d in [self.ph, self.pw, self.dim] {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 21 || &bytes[..9] != FEATURE_MAGIC {
            return Err(Error::parse(path, 0, 0, "missing SDDFEATv1 header"));
        }
        let dim_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (ph, pw, dim) = (dim_at(9), dim_at(13), dim_at(17));
        let body = &bytes[21..];
        if body.len() != ph * pw * dim * 4 {
            return Err(Error::Contract(format!(
                "{}: header says {ph}x{pw}x{dim} features, body holds {} bytes",
                path.display(),
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok(Self { ph, pw, dim, data })
    }
}

/// Patch grid dimensions `(ph, pw)` for an image.
pub fn grid_dims(width: usize, height: usize, patch: usize) -> (usize, usize) {
    (height.div_ceil(patch), width.div_ceil(patch))
}

pub trait FeatureExtractor {
    fn patch_size(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn extract(&self, image: &Image) -> Result<FeatureGrid>;
}

/// Default descriptor: mean RGB, std RGB, mean |dx|, mean |dy| per patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchStats {
    pub patch: usize,
}

impl Default for PatchStats {
    fn default() -> Self {
        Self { patch: 8 }
    }
}

impl FeatureExtractor for PatchStats {
    fn patch_size(&self) -> usize {
        self.patch
    }

    fn feature_dim(&self) -> usize {
        8
    }

    fn extract(&self, image: &Image) -> Result<FeatureGrid> {
        let p = self.patch;
        ensure_contract!(p > 0, "patch size must be positive");
        ensure_contract!(
            image.width >= p && image.height >= p,
            "image {}x{} smaller than patch size {p}",
            image.width,
            image.height
        );
        let (ph, pw) = grid_dims(image.width, image.height, p);
        let mut data = Vec::with_capacity(ph * pw * 8);
        for py in 0..ph {
            for px in 0..pw {
                let (x0, y0) = (px * p, py * p);
                let (x1, y1) = ((x0 + p).min(image.width), (y0 + p).min(image.height));
                let n = ((x1 - x0) * (y1 - y0)) as f64;
                let mut mean = [0.0; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let v = image.pixel(x, y);
                        (0..3).for_each(|c| mean[c] += v[c]);
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = [0.0; 3];
                let (mut gx, mut nx, mut gy, mut ny) = (0.0, 0usize, 0.0, 0usize);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let v = image.pixel(x, y);
                        (0..3).for_each(|c| var[c] += (v[c] - mean[c]).powi(2));
                        if x + 1 < x1 {
                            let r = image.pixel(x + 1, y);
                            gx += (0..3).map(|c| (r[c] - v[c]).abs()).sum::<f64>() / 3.0;
                            nx += 1;
                        }
                        if y + 1 < y1 {
                            let d = image.pixel(x, y + 1);
                            gy += (0..3).map(|c| (d[c] - v[c]).abs()).sum::<f64>() / 3.0;
                            ny += 1;
                        }
                    }
                }
                data.extend_from_slice(&mean);
                data.extend(var.iter().map(|v| (v / n).sqrt()));
                data.push(if nx > 0 { gx / nx as f64 } else { 0.0 });
                data.push(if ny > 0 { gy / ny as f64 } else { 0.0 });
            }
        }
        Ok(FeatureGrid { ph, pw, dim: 8, data })
    }
}

/// Precomputed features read from a `SDDFEATv1` file. `extract` checks
/// that the stored grid matches the image it stands for.
#[derive(Clone, Debug)]
pub struct FileFeatures {
    pub patch: usize,
    pub grid: FeatureGrid,
}

impl FileFeatures {
    pub fn load(path: impl AsRef<Path>, patch: usize) -> Result<Self> {
        Ok(Self {
            patch,
            grid: FeatureGrid::load(path)?,
        })
    }
}

impl FeatureExtractor for FileFeatures {
    fn patch_size(&self) -> usize {
        self.patch
    }

    fn feature_dim(&self) -> usize {
        self.grid.dim
    }

    fn extract(&self, image: &Image) -> Result<FeatureGrid> {
        let (ph, pw) = grid_dims(image.width, image.height, self.patch);
        ensure_contract!(
            (ph, pw) == (self.grid.ph, self.grid.pw),
            "feature file grid {}x{} does not match image grid {ph}x{pw}",
            self.grid.ph,
            self.grid.pw
        );
        Ok(self.grid.clone())
    }
}

/// Cosine similarity; a zero-norm vector counts as identical (1).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Per-patch residual `min(1, 2 - 2 cos)`.
pub fn residuals(feat_render: &FeatureGrid, feat_target: &FeatureGrid) -> Result<Vec<f64>> {
    ensure_contract!(
        (feat_render.ph, feat_render.pw, feat_render.dim) == (feat_target.ph, feat_target.pw, feat_target.dim),
        "feature grids differ in shape"
    );
    Ok((0..feat_render.num_patches())
        .map(|i| (2.0 - 2.0 * cosine(feat_render.patch(i), feat_target.patch(i))).min(1.0))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintyConfig {
    pub patch_size: usize,
    pub lambda_prior: f64,
    pub inner_steps: usize,
    pub lr: f64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            lambda_prior: 0.5,
            inner_steps: 20,
            lr: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyField {
    pub ph: usize,
    pub pw: usize,
    pub patch_size: usize,
    pub lambda_prior: f64,
    pub log_sigma: Vec<f64>,
}

impl UncertaintyField {
    /// Field for a `width x height` image with every `sigma = 1`.
    pub fn new(width: usize, height: usize, patch_size: usize, lambda_prior: f64) -> Self {
        let (ph, pw) = grid_dims(width, height, patch_size);
        Self {
            ph,
            pw,
            patch_size,
            lambda_prior,
            log_sigma: vec![0.0; ph * pw],
        }
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.log_sigma[i].exp()
    }

    pub fn set_sigma(&mut self, i: usize, sigma: f64) {
        self.log_sigma[i] = sigma.ln();
    }

    fn check_grid(&self, g: &FeatureGrid) -> Result<()> {
        ensure_contract!(
            (g.ph, g.pw) == (self.ph, self.pw),
            "feature grid {}x{} not aligned with sigma grid {}x{}",
            g.ph,
            g.pw,
            self.ph,
            self.pw
        );
        Ok(())
    }

    /// Gradient descent on each `log_sigma` against fixed residuals.
    pub fn fit(&mut self, residuals: &[f64], steps: usize, lr: f64) {
        for (u, &r) in self.log_sigma.iter_mut().zip(residuals) {
            for _ in 0..steps {
                let g = self.lambda_prior - r * (-2.0 * *u).exp();
                *u = (*u - lr * g).clamp(-LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT);
            }
        }
    }

    /// Refits the field for one render/target pair.
    pub fn update(&mut self, feat_render: &FeatureGrid, feat_target: &FeatureGrid, steps: usize, lr: f64) -> Result<()> {
        self.check_grid(feat_render)?;
        let r = residuals(feat_render, feat_target)?;
        self.fit(&r, steps, lr);
        Ok(())
    }

    /// Binary mask at pixel resolution: 1 where `sigma^2 < 1/2`.
    pub fn make_mask(&self, width: usize, height: usize) -> Mask {
        let threshold = 0.5f64.ln();
        let dynamic: Vec<bool> = self.log_sigma.iter().map(|u| 2.0 * u < threshold).collect();
        let mut mask = Mask::zeros(width, height);
        for y in 0..height {
            let py = (y / self.patch_size).min(self.ph - 1);
            for x in 0..width {
                let px = (x / self.patch_size).min(self.pw - 1);
                mask.data[y * width + x] = u8::from(dynamic[py * self.pw + px]);
            }
        }
        mask
    }
}

/// Mean patch loss `r / (2 sigma^2) + lambda_prior ln sigma`.
pub fn uncertainty_loss(feat_render: &FeatureGrid, feat_target: &FeatureGrid, field: &UncertaintyField) -> Result<f64> {
    field.check_grid(feat_render)?;
    let r = residuals(feat_render, feat_target)?;
    let n = r.len().max(1) as f64;
    Ok(r
        .iter()
        .zip(&field.log_sigma)
        .map(|(r, u)| r * (-2.0 * u).exp() / 2.0 + field.lambda_prior * u)
        .sum::<f64>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(vectors: &[[f64; 2]]) -> FeatureGrid {
        FeatureGrid {
            ph: 1,
            pw: vectors.len(),
            dim: 2,
            data: vectors.iter().flatten().copied().collect(),
        }
    }

    #[test]
    fn gray_image_features() {
        let img = Image::filled(16, 16, [0.5; 3]);
        let f = PatchStats::default().extract(&img).unwrap();
        assert_eq!((f.ph, f.pw, f.dim), (2, 2, 8));
        for i in 0..4 {
            assert_eq!(f.patch(i), &[0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn checkerboard_gradients_are_symmetric() {
        let img = Image::from_fn(8, 8, |x, y| [((x + y) % 2) as f64; 3]);
        let f = PatchStats::default().extract(&img).unwrap();
        let p = f.patch(0);
        assert_eq!(p[6], 1.0);
        assert_eq!(p[6], p[7]);
        assert_relative_eq!(p[3], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn patch_permutation_permutes_features() {
        let a = Image::from_fn(16, 8, |x, y| if x < 8 { [0.2, 0.4, (y % 3) as f64 / 3.0] } else { [0.9, 0.1, 0.3] });
        let b = Image::from_fn(16, 8, |x, y| a.pixel((x + 8) % 16, y));
        let fa = PatchStats::default().extract(&a).unwrap();
        let fb = PatchStats::default().extract(&b).unwrap();
        assert_eq!(fa.patch(0), fb.patch(1));
        assert_eq!(fa.patch(1), fb.patch(0));
    }

    #[test]
    fn loss_examples() {
        let mut field = UncertaintyField::new(8, 8, 8, 0.5);
        let same = grid(&[[1.0, 0.0]]);
        assert_eq!(uncertainty_loss(&same, &same, &field).unwrap(), 0.0);
        let orth = grid(&[[0.0, 1.0]]);
        assert_relative_eq!(uncertainty_loss(&same, &orth, &field).unwrap(), 0.5, epsilon = 1e-15);
        field.lambda_prior = 3.0;
        assert_relative_eq!(uncertainty_loss(&same, &orth, &field).unwrap(), 0.5, epsilon = 1e-15);
        let zero = grid(&[[0.0, 0.0]]);
        assert_eq!(residuals(&zero, &orth).unwrap(), vec![0.0]);
    }

    #[test]
    fn fit_converges_to_closed_form() {
        let lambda = 0.5;
        for &r in &[0.05, 0.2, 0.5, 1.0] {
            let mut field = UncertaintyField::new(8, 8, 8, lambda);
            field.fit(&[r], 2000, 0.1);
            let expected = (r / lambda).sqrt();
            assert!((field.sigma(0) - expected).abs() < 1e-3, "r={r}");
        }
    }

    #[test]
    fn mask_threshold_is_strict() {
        let mut field = UncertaintyField::new(24, 8, 8, 0.5);
        field.set_sigma(0, 0.5);
        field.set_sigma(1, 0.8);
        field.log_sigma[2] = 0.5f64.ln() / 2.0;
        let m = field.make_mask(24, 8);
        assert_eq!(m.get(3, 3), 1);
        assert_eq!(m.get(11, 3), 0);
        assert_eq!(m.get(19, 3), 0);
    }

    #[test]
    fn feature_file_round_trip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let g = PatchStats::default().extract(&Image::filled(16, 24, [0.25; 3])).unwrap();
        g.save(&path).unwrap();
        let ext = FileFeatures::load(&path, 8).unwrap();
        assert_eq!(ext.extract(&Image::new(16, 24)).unwrap(), g);
        assert!(matches!(ext.extract(&Image::new(24, 24)), Err(Error::Contract(_))));
    }
}
