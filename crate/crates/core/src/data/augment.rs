//! Two-view stochastic augmentation over patch grids.
//!
//! The augmentation family is additive feature noise, global feature
//! scaling, horizontal patch-grid flip, and crop-and-resize. The anomaly
//! map undergoes the same geometric transforms as the patch grid so pooled
//! anomaly vectors stay aligned with their patches.

use super::{pool::pad_to_divisible, PixelGrid, Sample};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Std-dev of per-feature additive Gaussian noise.
    pub noise_sigma: f64,
    /// Global feature scale drawn from [1 - jitter, 1 + jitter].
    pub scale_jitter: f64,
    /// Side fraction of the crop window; 1.0 disables cropping.
    pub crop_fraction: f64,
    pub flip_prob: f64,
    /// Base seed for the augmentation stream.
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            noise_sigma: 0.05,
            scale_jitter: 0.1,
            crop_fraction: 0.9,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 || self.scale_jitter < 0.0 {
            return Err(Error::invalid_argument(
                "noise_sigma and scale_jitter must be nonnegative",
            ));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::invalid_argument("crop_fraction must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid_argument("flip_prob must be in [0, 1]"));
        }
        Ok(())
    }
}

/// One augmented payload. The map, when present, may carry edge-replicated
/// padding up to a multiple of the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub patches: Mat,
    pub anomaly_map: Option<PixelGrid>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub id: String,
    pub a: View,
    pub b: View,
}

fn flip_patches(patches: &mut Mat, p: usize) {
    let d = patches.cols;
    for r in 0..p {
        for c in 0..p / 2 {
            let (i, j) = (r * p + c, r * p + (p - 1 - c));
            for k in 0..d {
                patches.data.swap(i * d + k, j * d + k);
            }
        }
    }
}

fn flip_grid(grid: &mut PixelGrid) {
    for r in 0..grid.h {
        for c in 0..grid.w / 2 {
            let (i, j) = (r * grid.w + c, r * grid.w + (grid.w - 1 - c));
            grid.data.swap(i, j);
        }
    }
}

/// Nearest-neighbor source index when resizing `src_len` cells to
/// `dst_len` cells.
#[inline]
fn nn_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    ((2 * dst + 1) * src_len / (2 * dst_len)).min(src_len - 1)
}

fn crop_resize_patches(patches: &Mat, p: usize, crop: usize, r0: usize, c0: usize) -> Mat {
    let d = patches.cols;
    let mut out = Mat::zeros(p * p, d);
    for r in 0..p {
        let sr = r0 + nn_index(r, crop, p);
        for c in 0..p {
            let sc = c0 + nn_index(c, crop, p);
            out.row_mut(r * p + c).copy_from_slice(patches.row(sr * p + sc));
        }
    }
    out
}

fn crop_resize_grid(grid: &PixelGrid, p: usize, crop: usize, r0: usize, c0: usize) -> PixelGrid {
    // work on a padded copy so patch cells are equal-area
    let padded = pad_to_divisible(grid, p);
    let (ch, cw) = (padded.h / p, padded.w / p);
    let (win_h, win_w) = (crop * ch, crop * cw);
    let (or_, oc) = (r0 * ch, c0 * cw);
    let mut out = PixelGrid::zeros(padded.h, padded.w);
    for r in 0..padded.h {
        let sr = or_ + nn_index(r, win_h, padded.h);
        for c in 0..padded.w {
            let sc = oc + nn_index(c, win_w, padded.w);
            out.set(r, c, padded.get(sr, sc));
        }
    }
    out
}

fn augment_once<R: Rng>(sample: &Sample, p: usize, params: &AugmentParams, rng: &mut R) -> View {
    let mut patches = sample.patches.clone();
    let mut map = sample.anomaly_map.clone();

    if params.flip_prob > 0.0 && rng.random::<f64>() < params.flip_prob {
        flip_patches(&mut patches, p);
        if let Some(m) = map.as_mut() {
            flip_grid(m);
        }
    }

    if params.crop_fraction < 1.0 {
        let crop = ((p as f64 * params.crop_fraction).round() as usize).clamp(1, p);
        if crop < p {
            let r0 = rng.random_range(0..=p - crop);
            let c0 = rng.random_range(0..=p - crop);
            patches = crop_resize_patches(&patches, p, crop, r0, c0);
            map = map.map(|m| crop_resize_grid(&m, p, crop, r0, c0));
        }
    }

    if params.scale_jitter > 0.0 {
        let scale = 1.0 - params.scale_jitter + 2.0 * params.scale_jitter * rng.random::<f64>();
        for v in patches.data.iter_mut() {
            *v *= scale;
        }
    }

    if params.noise_sigma > 0.0 {
        for v in patches.data.iter_mut() {
            *v += params.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }

    View {
        patches,
        anomaly_map: map,
    }
}

/// Produces the two stochastic views of a sample. The patch grid side is
/// inferred from the sample (`p² = patches.rows`).
pub fn make_views<R: Rng>(sample: &Sample, params: &AugmentParams, rng: &mut R) -> ViewPair {
    let p = (sample.patches.rows as f64).sqrt().round() as usize;
    debug_assert_eq!(p * p, sample.patches.rows, "patch grid must be square");
    ViewPair {
        id: sample.id.clone(),
        a: augment_once(sample, p, params, rng),
        b: augment_once(sample, p, params, rng),
    }
}
