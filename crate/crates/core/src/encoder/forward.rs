//! Forward pass with activation caching.

use super::{
    build_guidance_vector, EncodeOutput, EncoderParams, GuidanceHeads, GuidanceMode, LayerParams,
    RegionGuidanceParams,
};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::numerics::{normalize_unit, softmax};

pub(crate) const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.044715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub(crate) fn gelu_deriv(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

/// Row-wise RMS norm with scale weights; returns the output and the per-row
/// rms values needed by the backward pass.
pub(crate) fn rmsnorm(x: &Mat, scale: &[f64]) -> (Mat, Vec<f64>) {
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut rms = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / x.cols as f64;
        let rv = (ms + RMS_EPS).sqrt();
        rms.push(rv);
        let out_row = out.row_mut(r);
        for (j, (&v, &g)) in row.iter().zip(scale).enumerate() {
            out_row[j] = g * v / rv;
        }
    }
    (out, rms)
}

/// x · w + b, rows are tokens.
pub(crate) fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut out = x.matmul(w);
    for r in 0..out.rows {
        let row = out.row_mut(r);
        for (v, &bi) in row.iter_mut().zip(b) {
            *v += bi;
        }
    }
    out
}

fn guidance_applies(heads_cfg: GuidanceHeads, head: usize) -> bool {
    match heads_cfg {
        GuidanceHeads::All => true,
        GuidanceHeads::First => head == 0,
    }
}

/// Per-layer attention state kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Per-head T×T post-softmax rows.
    pub weights: Vec<Mat>,
    /// Per-head context, concatenated T×d_model.
    pub ctx: Mat,
}

/// Multi-head attention over pre-normalized tokens. `guidance`, when
/// present, is added to the pre-softmax logits at the patch-key columns
/// (CLS key column always gets 0) of the selected query rows and heads.
pub(crate) fn attention_core(
    normed: &Mat,
    layer: &LayerParams,
    heads: usize,
    guidance: Option<&[f64]>,
    mode: GuidanceMode,
    heads_cfg: GuidanceHeads,
) -> Result<(AttentionCache, Mat)> {
    let t = normed.rows;
    let dm = normed.cols;
    let dh = dm / heads;
    if let Some(g) = guidance {
        if g.len() != t - 1 {
            return Err(Error::invalid_argument(format!(
                "guidance length {} does not match patch token count {}",
                g.len(),
                t - 1
            )));
        }
    }

    let q = linear(normed, &layer.wq, &layer.bq);
    let k = linear(normed, &layer.wk, &layer.bk);
    let v = linear(normed, &layer.wv, &layer.bv);
    let scale = 1.0 / (dh as f64).sqrt();

    let mut weights = Vec::with_capacity(heads);
    let mut ctx = Mat::zeros(t, dm);
    for head in 0..heads {
        let col0 = head * dh;
        let mut w_head = Mat::zeros(t, t);
        for row in 0..t {
            let mut logits = Vec::with_capacity(t);
            for col in 0..t {
                let mut dotv = 0.0;
                for j in 0..dh {
                    dotv += q.get(row, col0 + j) * k.get(col, col0 + j);
                }
                let mut logit = dotv * scale;
                if let Some(g) = guidance {
                    let row_selected = match mode {
                        GuidanceMode::ClsRowOnly => row == 0,
                        GuidanceMode::AllTokens => true,
                    };
                    if row_selected && col > 0 && guidance_applies(heads_cfg, head) {
                        logit += g[col - 1];
                    }
                }
                logits.push(logit);
            }
            let sm = softmax(&logits, 1.0)?;
            w_head.row_mut(row).copy_from_slice(sm.probs());
        }
        // ctx_head = weights · V_head
        for row in 0..t {
            for col in 0..t {
                let w = w_head.get(row, col);
                if w == 0.0 {
                    continue;
                }
                for j in 0..dh {
                    let cur = ctx.get(row, col0 + j);
                    ctx.set(row, col0 + j, cur + w * v.get(col, col0 + j));
                }
            }
        }
        weights.push(w_head);
    }

    let out = linear(&ctx, &layer.wo, &layer.bo);
    Ok((AttentionCache { q, k, v, weights, ctx }, out))
}

/// Standalone guided attention sublayer: tokens (CLS at row 0) in,
/// attended-and-projected tokens out.
pub fn amg_attention(
    tokens: &Mat,
    guidance: &[f64],
    layer: &LayerParams,
    heads: usize,
    mode: GuidanceMode,
    heads_cfg: GuidanceHeads,
) -> Result<Mat> {
    if tokens.rows < 2 {
        return Err(Error::invalid_argument(
            "need a CLS token plus at least one patch token",
        ));
    }
    if tokens.cols != layer.wq.rows || tokens.cols % heads != 0 {
        return Err(Error::invalid_argument("token/weight shape mismatch"));
    }
    let (_, out) = attention_core(tokens, layer, heads, Some(guidance), mode, heads_cfg)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub x_in: Mat,
    pub norm1_out: Mat,
    pub rms1: Vec<f64>,
    pub attn: AttentionCache,
    pub x_mid: Mat,
    pub norm2_out: Mat,
    pub rms2: Vec<f64>,
    pub ffn_pre: Mat,
    pub ffn_act: Mat,
}

/// Everything the backward pass needs, captured during [`encode`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) patches: Mat,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) x_final: Mat,
    pub(crate) rms_final: Vec<f64>,
    /// Norm of the final-norm CLS row, before unit normalization.
    pub(crate) cls_feat_norm: f64,
    pub(crate) z: Vec<f64>,
    pub(crate) proj_pre_norm: f64,
    pub(crate) h: Vec<f64>,
}

/// Encodes one view: patch embedding, `layers` transformer blocks with
/// guidance injected in the final block only, unit-normalized CLS feature
/// `z`, and unit-normalized projection `h`.
pub fn encode(
    patches: &Mat,
    pooled_anomaly: Option<&[f64]>,
    params: &EncoderParams,
    rg: &RegionGuidanceParams,
) -> Result<(EncodeOutput, ForwardCache)> {
    let cfg = &params.config;
    if patches.cols != cfg.d_in {
        return Err(Error::invalid_argument(format!(
            "patch feature dim {} does not match encoder d_in {}",
            patches.cols, cfg.d_in
        )));
    }
    let n = patches.rows;
    let guidance = match pooled_anomaly {
        Some(scores) => {
            if scores.len() != n {
                return Err(Error::invalid_argument(format!(
                    "pooled anomaly length {} does not match patch count {n}",
                    scores.len()
                )));
            }
            Some(build_guidance_vector(scores, rg)?)
        }
        None => None,
    };

    // tokens: CLS then embedded patches
    let t = n + 1;
    let mut x = Mat::zeros(t, cfg.d_model);
    x.row_mut(0).copy_from_slice(&params.cls_token);
    let embedded = linear(patches, &params.patch_embed, &params.patch_bias);
    for r in 0..n {
        x.row_mut(r + 1).copy_from_slice(embedded.row(r));
    }

    let mut layer_caches = Vec::with_capacity(cfg.layers);
    for (li, layer) in params.layers.iter().enumerate() {
        let last = li + 1 == cfg.layers;
        let (norm1_out, rms1) = rmsnorm(&x, &layer.norm1);
        let layer_guidance = if last { guidance.as_deref() } else { None };
        let (attn, attn_out) = attention_core(
            &norm1_out,
            layer,
            cfg.heads,
            layer_guidance,
            rg.mode,
            rg.heads,
        )?;
        let mut x_mid = x.clone();
        x_mid.add_scaled(&attn_out, 1.0);
        let (norm2_out, rms2) = rmsnorm(&x_mid, &layer.norm2);
        let ffn_pre = linear(&norm2_out, &layer.w1, &layer.b1);
        let mut ffn_act = ffn_pre.clone();
        for v in ffn_act.data.iter_mut() {
            *v = gelu(*v);
        }
        let ffn_out = linear(&ffn_act, &layer.w2, &layer.b2);
        let mut x_out = x_mid.clone();
        x_out.add_scaled(&ffn_out, 1.0);
        if !x_out.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "non-finite activation in layer {li}"
            )));
        }
        layer_caches.push(LayerCache {
            x_in: x,
            norm1_out,
            rms1,
            attn,
            x_mid,
            norm2_out,
            rms2,
            ffn_pre,
            ffn_act,
        });
        x = x_out;
    }

    let (final_out, rms_final) = rmsnorm(&x, &params.final_norm);
    let cls_feat = final_out.row(0).to_vec();
    let cls_feat_norm = crate::linalg::norm2(&cls_feat);
    let z = normalize_unit(&cls_feat)?;
    let mut proj_pre = params.proj_w.matvec_t(&z);
    for (v, &b) in proj_pre.iter_mut().zip(&params.proj_b) {
        *v += b;
    }
    let proj_pre_norm = crate::linalg::norm2(&proj_pre);
    let h = normalize_unit(&proj_pre)?;
    if !z.iter().all(|v| v.is_finite()) || !h.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalFailure(
            "non-finite activation in projection head".into(),
        ));
    }

    let attention_cls = layer_caches
        .last()
        .expect("at least one layer")
        .attn
        .weights
        .iter()
        .map(|w| w.row(0).to_vec())
        .collect();

    let output = EncodeOutput {
        z: z.clone(),
        h: h.clone(),
        attention_cls,
    };
    let cache = ForwardCache {
        patches: patches.clone(),
        layers: layer_caches,
        x_final: x,
        rms_final,
        cls_feat_norm,
        z,
        proj_pre_norm,
        h,
    };
    Ok((output, cache))
}

/// Encode without keeping the cache (teacher passes, evaluation).
pub fn encode_no_cache(
    patches: &Mat,
    pooled_anomaly: Option<&[f64]>,
    params: &EncoderParams,
    rg: &RegionGuidanceParams,
) -> Result<EncodeOutput> {
    encode(patches, pooled_anomaly, params, rg).map(|(out, _)| out)
}
