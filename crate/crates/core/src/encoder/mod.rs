//! Guided-attention transformer encoder.
//!
//! A small pre-norm ViT over patch feature vectors whose final attention
//! layer adds a guidance offset — derived from the pooled anomaly map —
//! to the pre-softmax logits. Forward passes cache activations so
//! [`encoder_backward`] can produce analytic gradients for every
//! parameter; the guidance offsets are constants and never receive
//! gradient.

mod backward;
mod forward;
mod guidance;

pub use backward::encoder_backward;
pub use forward::{amg_attention, encode, encode_no_cache, ForwardCache};
pub use guidance::{build_guidance_vector, region_guidance};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Which attention rows receive the guidance offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Offsets only the CLS query row (default).
    ClsRowOnly,
    /// Offsets every query row.
    AllTokens,
}

/// What happens to scores at or above `tau2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighBranch {
    /// Clamp to the band maximum γ·log(τ2/τ1), keeping high-confidence
    /// anomaly patches boosted (default).
    Saturate,
    /// Mask the patch outright with -inf, zeroing its attention weight.
    HardMask,
}

/// Which heads receive the guidance offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceHeads {
    All,
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionGuidanceParams {
    /// Low-confidence threshold; scores below contribute nothing.
    pub tau1: f64,
    /// High-confidence threshold; scores at or above take the high branch.
    pub tau2: f64,
    /// Slope of the log band between the thresholds.
    pub gamma: f64,
    pub mode: GuidanceMode,
    pub high_branch: HighBranch,
    pub heads: GuidanceHeads,
}

impl Default for RegionGuidanceParams {
    fn default() -> Self {
        RegionGuidanceParams {
            tau1: 0.15,
            tau2: 0.7,
            gamma: 2.0,
            mode: GuidanceMode::ClsRowOnly,
            high_branch: HighBranch::Saturate,
            heads: GuidanceHeads::All,
        }
    }
}

impl RegionGuidanceParams {
    pub fn validate(&self) -> Result<()> {
        // tau1 = 0 would make the log band ill-defined
        if !(self.tau1 > 0.0 && self.tau1 < self.tau2 && self.tau2 <= 1.0) {
            return Err(Error::invalid_argument(format!(
                "require 0 < tau1 < tau2 <= 1, got tau1 = {}, tau2 = {}",
                self.tau1, self.tau2
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::invalid_argument("gamma must be positive"));
        }
        Ok(())
    }
}

/// Encoder shape. `d_model` doubles as the output feature dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub d_model: usize,
    /// Projection-head output dimension for the contrastive space.
    pub d_h: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub heads: usize,
}

impl EncoderConfig {
    /// Desk-scale default: small enough for finite-difference sweeps,
    /// large enough to exercise multi-head logic.
    pub fn desk_scale(d_in: usize) -> Self {
        EncoderConfig {
            d_in,
            d_model: 32,
            d_h: 16,
            d_ff: 64,
            layers: 2,
            heads: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 || self.d_h == 0 || self.d_ff == 0 {
            return Err(Error::invalid_argument("encoder dimensions must be positive"));
        }
        if self.layers == 0 || self.heads == 0 {
            return Err(Error::invalid_argument("layer and head counts must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::invalid_argument(format!(
                "d_model = {} not divisible by heads = {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// One transformer block: pre-norm attention then pre-norm feed-forward,
/// both with residual connections. Norms are scale-only (RMS).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub norm1: Vec<f64>,
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
    pub norm2: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// d_in × d_model.
    pub patch_embed: Mat,
    pub patch_bias: Vec<f64>,
    pub cls_token: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Vec<f64>,
    /// d_model × d_h.
    pub proj_w: Mat,
    pub proj_b: Vec<f64>,
}

/// Output of one encode: unit feature `z`, unit contrastive projection
/// `h`, and the final-layer CLS attention rows (one per head) for
/// diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOutput {
    pub z: Vec<f64>,
    pub h: Vec<f64>,
    pub attention_cls: Vec<Vec<f64>>,
}

fn init_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

impl EncoderParams {
    /// Random initialization: normal weights scaled by 1/√fan_in, unit
    /// norm scales, zero biases.
    pub fn init<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dm = config.d_model;
        let layers = (0..config.layers)
            .map(|_| {
                let w_std = 1.0 / (dm as f64).sqrt();
                LayerParams {
                    norm1: vec![1.0; dm],
                    wq: init_mat(rng, dm, dm, w_std),
                    bq: vec![0.0; dm],
                    wk: init_mat(rng, dm, dm, w_std),
                    bk: vec![0.0; dm],
                    wv: init_mat(rng, dm, dm, w_std),
                    bv: vec![0.0; dm],
                    wo: init_mat(rng, dm, dm, w_std),
                    bo: vec![0.0; dm],
                    norm2: vec![1.0; dm],
                    w1: init_mat(rng, dm, config.d_ff, w_std),
                    b1: vec![0.0; config.d_ff],
                    w2: init_mat(rng, config.d_ff, dm, 1.0 / (config.d_ff as f64).sqrt()),
                    b2: vec![0.0; dm],
                }
            })
            .collect();
        Ok(EncoderParams {
            config,
            patch_embed: init_mat(rng, config.d_in, dm, 1.0 / (config.d_in as f64).sqrt()),
            patch_bias: vec![0.0; dm],
            cls_token: init_mat(rng, 1, dm, 0.02).data,
            layers,
            final_norm: vec![1.0; dm],
            proj_w: init_mat(rng, dm, config.d_h, 1.0 / (dm as f64).sqrt()),
            proj_b: vec![0.0; config.d_h],
        })
    }

    /// Same shapes, all zeros. Gradient containers are built this way.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_params_mut(|_, values| {
            for v in values {
                *v = 0.0;
            }
        });
        out
    }

    /// Visits every parameter array as `(name, slice)`, in a fixed order
    /// shared by flattening, checkpoints, and the optimizer.
    pub fn visit_params<F: FnMut(&str, &[f64])>(&self, mut f: F) {
        f("patch_embed", &self.patch_embed.data);
        f("patch_bias", &self.patch_bias);
        f("cls_token", &self.cls_token);
        for (i, l) in self.layers.iter().enumerate() {
            let n = |field: &str| format!("layer{i}.{field}");
            f(&n("norm1"), &l.norm1);
            f(&n("wq"), &l.wq.data);
            f(&n("bq"), &l.bq);
            f(&n("wk"), &l.wk.data);
            f(&n("bk"), &l.bk);
            f(&n("wv"), &l.wv.data);
            f(&n("bv"), &l.bv);
            f(&n("wo"), &l.wo.data);
            f(&n("bo"), &l.bo);
            f(&n("norm2"), &l.norm2);
            f(&n("w1"), &l.w1.data);
            f(&n("b1"), &l.b1);
            f(&n("w2"), &l.w2.data);
            f(&n("b2"), &l.b2);
        }
        f("final_norm", &self.final_norm);
        f("proj_w", &self.proj_w.data);
        f("proj_b", &self.proj_b);
    }

    pub fn visit_params_mut<F: FnMut(&str, &mut [f64])>(&mut self, mut f: F) {
        f("patch_embed", &mut self.patch_embed.data);
        f("patch_bias", &mut self.patch_bias);
        f("cls_token", &mut self.cls_token);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = |field: &str| format!("layer{i}.{field}");
            f(&n("norm1"), &mut l.norm1);
            f(&n("wq"), &mut l.wq.data);
            f(&n("bq"), &mut l.bq);
            f(&n("wk"), &mut l.wk.data);
            f(&n("bk"), &mut l.bk);
            f(&n("wv"), &mut l.wv.data);
            f(&n("bv"), &mut l.bv);
            f(&n("wo"), &mut l.wo.data);
            f(&n("bo"), &mut l.bo);
            f(&n("norm2"), &mut l.norm2);
            f(&n("w1"), &mut l.w1.data);
            f(&n("b1"), &mut l.b1);
            f(&n("w2"), &mut l.w2.data);
            f(&n("b2"), &mut l.b2);
        }
        f("final_norm", &mut self.final_norm);
        f("proj_w", &mut self.proj_w.data);
        f("proj_b", &mut self.proj_b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, v| n += v.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(|_, v| out.extend_from_slice(v));
        out
    }

    /// Writes `flat` back into the parameter arrays; shapes come from
    /// `self`.
    pub fn unflatten_into(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        let mut overrun = false;
        self.visit_params_mut(|_, v| {
            if offset + v.len() > flat.len() {
                overrun = true;
                return;
            }
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        if overrun || offset != flat.len() {
            return Err(Error::InvalidState(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    /// self += alpha · other, matched field by field.
    pub fn add_scaled(&mut self, other: &EncoderParams, alpha: f64) {
        let flat_other = other.flatten();
        let mut offset = 0;
        self.visit_params_mut(|_, v| {
            for x in v.iter_mut() {
                *x += alpha * flat_other[offset];
                offset += 1;
            }
        });
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(|_, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EncoderParams::init(EncoderConfig::desk_scale(8), &mut rng).unwrap();
        let flat = params.flatten();
        assert_eq!(flat.len(), params.param_count());
        let mut rebuilt = params.zeros_like();
        rebuilt.unflatten_into(&flat).unwrap();
        assert_eq!(params, rebuilt);
        assert!(rebuilt.unflatten_into(&flat[1..]).is_err());
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut config = EncoderConfig::desk_scale(8);
        config.heads = 5;
        assert!(config.validate().is_err());
    }

    #[test]
    fn guidance_params_validation() {
        assert!(RegionGuidanceParams::default().validate().is_ok());
        let bad = RegionGuidanceParams {
            tau1: 0.8,
            tau2: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let zero_tau1 = RegionGuidanceParams {
            tau1: 0.0,
            ..Default::default()
        };
        assert!(zero_tau1.validate().is_err());
    }
}
