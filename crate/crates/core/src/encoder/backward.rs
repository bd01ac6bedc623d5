//! Analytic gradients for [`encode`](super::encode).
//!
//! The backward pass mirrors the forward cache layer by layer. Guidance
//! offsets are additive constants inside the softmax, so masked columns
//! (weight exactly 0) contribute exactly zero gradient and no gradient
//! flows toward the anomaly map.

use super::forward::{gelu_deriv, ForwardCache};
use super::EncoderParams;
use crate::error::{Error, Result};
use crate::linalg::{axpy, Mat};

fn add_col_sums(dst: &mut [f64], m: &Mat) {
    for r in 0..m.rows {
        axpy(dst, m.row(r), 1.0);
    }
}

/// d(rmsnorm)/dx and scale gradients. `rms` are the cached per-row values.
fn rmsnorm_backward(x: &Mat, scale: &[f64], rms: &[f64], dy: &Mat, dscale: &mut [f64]) -> Mat {
    let d = x.cols as f64;
    let mut dx = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let rv = rms[r];
        let xr = x.row(r);
        let dyr = dy.row(r);
        let mut s = 0.0;
        for j in 0..x.cols {
            dscale[j] += dyr[j] * xr[j] / rv;
            s += scale[j] * dyr[j] * xr[j];
        }
        let dxr = dx.row_mut(r);
        for j in 0..x.cols {
            dxr[j] = scale[j] * dyr[j] / rv - xr[j] * s / (d * rv * rv * rv);
        }
    }
    dx
}

/// Gradient of `v / ‖v‖` applied to upstream `dunit`, using the cached
/// unit vector and pre-normalization norm.
fn unit_norm_backward(unit: &[f64], norm: f64, dunit: &[f64]) -> Vec<f64> {
    let proj = crate::linalg::dot(unit, dunit);
    unit.iter()
        .zip(dunit)
        .map(|(&u, &du)| (du - u * proj) / norm)
        .collect()
}

/// Parameter gradients for one cached forward pass, given upstream
/// gradients on `z` and `h`. Returns an [`EncoderParams`]-shaped container.
pub fn encoder_backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    dz_up: &[f64],
    dh_up: &[f64],
) -> Result<EncoderParams> {
    let cfg = &params.config;
    if cache.layers.len() != params.layers.len() {
        return Err(Error::InvalidState(format!(
            "cache has {} layers, params have {}",
            cache.layers.len(),
            params.layers.len()
        )));
    }
    if dz_up.len() != cfg.d_model || dh_up.len() != cfg.d_h {
        return Err(Error::InvalidState(format!(
            "upstream gradient dims ({}, {}) do not match encoder ({}, {})",
            dz_up.len(),
            dh_up.len(),
            cfg.d_model,
            cfg.d_h
        )));
    }

    let mut grads = params.zeros_like();
    let t = cache.x_final.rows;
    let dh_count = cfg.head_dim();
    let scale = 1.0 / (dh_count as f64).sqrt();

    // projection head: h = normalize(proj_wᵀ z + proj_b)
    let dproj_pre = unit_norm_backward(&cache.h, cache.proj_pre_norm, dh_up);
    grads.proj_w.add_outer(&cache.z, &dproj_pre, 1.0);
    axpy(&mut grads.proj_b, &dproj_pre, 1.0);
    let mut dz = dz_up.to_vec();
    axpy(&mut dz, &params.proj_w.matvec(&dproj_pre), 1.0);

    // z = normalize(final-norm CLS row)
    let dcls_feat = unit_norm_backward(&cache.z, cache.cls_feat_norm, &dz);

    // final rmsnorm touches only the CLS row downstream
    let mut dfinal_out = Mat::zeros(t, cfg.d_model);
    dfinal_out.row_mut(0).copy_from_slice(&dcls_feat);
    let mut dx = rmsnorm_backward(
        &cache.x_final,
        &params.final_norm,
        &cache.rms_final,
        &dfinal_out,
        &mut grads.final_norm,
    );

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];

        // x_out = x_mid + ffn_out
        let dffn_out = dx.clone();
        let mut dx_mid = dx;

        // ffn_out = gelu(norm2_out · w1 + b1) · w2 + b2
        lg.w2.add_scaled(&lc.ffn_act.matmul_tn(&dffn_out), 1.0);
        add_col_sums(&mut lg.b2, &dffn_out);
        let dffn_act = dffn_out.matmul_nt(&layer.w2);
        let mut dffn_pre = dffn_act;
        for (g, &pre) in dffn_pre.data.iter_mut().zip(&lc.ffn_pre.data) {
            *g *= gelu_deriv(pre);
        }
        lg.w1.add_scaled(&lc.norm2_out.matmul_tn(&dffn_pre), 1.0);
        add_col_sums(&mut lg.b1, &dffn_pre);
        let dnorm2_out = dffn_pre.matmul_nt(&layer.w1);
        let dx_mid_from_norm =
            rmsnorm_backward(&lc.x_mid, &layer.norm2, &lc.rms2, &dnorm2_out, &mut lg.norm2);
        dx_mid.add_scaled(&dx_mid_from_norm, 1.0);

        // x_mid = x_in + attn_out, attn_out = ctx · wo + bo
        let dattn_out = dx_mid.clone();
        let mut dx_in = dx_mid;
        lg.wo.add_scaled(&lc.attn.ctx.matmul_tn(&dattn_out), 1.0);
        add_col_sums(&mut lg.bo, &dattn_out);
        let dctx = dattn_out.matmul_nt(&layer.wo);

        let mut dq = Mat::zeros(t, cfg.d_model);
        let mut dk = Mat::zeros(t, cfg.d_model);
        let mut dv = Mat::zeros(t, cfg.d_model);
        for head in 0..cfg.heads {
            let col0 = head * dh_count;
            let w_head = &lc.attn.weights[head];
            // dweights = dctx_h · V_hᵀ ; dV_h += W_hᵀ · dctx_h
            let mut dweights = Mat::zeros(t, t);
            for row in 0..t {
                for col in 0..t {
                    let mut acc = 0.0;
                    for j in 0..dh_count {
                        acc += dctx.get(row, col0 + j) * lc.attn.v.get(col, col0 + j);
                    }
                    dweights.set(row, col, acc);
                    let w = w_head.get(row, col);
                    if w != 0.0 {
                        for j in 0..dh_count {
                            let cur = dv.get(col, col0 + j);
                            dv.set(col, col0 + j, cur + w * dctx.get(row, col0 + j));
                        }
                    }
                }
            }
            // softmax rows: dlogit = w ⊙ (dw - <w, dw>)
            for row in 0..t {
                let wr = w_head.row(row);
                let dwr = dweights.row(row).to_vec();
                let inner = crate::linalg::dot(wr, &dwr);
                for col in 0..t {
                    let dlogit = wr[col] * (dwr[col] - inner);
                    if dlogit == 0.0 {
                        continue;
                    }
                    // logits = scale · Q_h K_hᵀ (+ constant guidance)
                    for j in 0..dh_count {
                        let cur_q = dq.get(row, col0 + j);
                        dq.set(
                            row,
                            col0 + j,
                            cur_q + scale * dlogit * lc.attn.k.get(col, col0 + j),
                        );
                        let cur_k = dk.get(col, col0 + j);
                        dk.set(
                            col,
                            col0 + j,
                            cur_k + scale * dlogit * lc.attn.q.get(row, col0 + j),
                        );
                    }
                }
            }
        }

        // Q = norm1_out · wq + bq, same for K and V
        lg.wq.add_scaled(&lc.norm1_out.matmul_tn(&dq), 1.0);
        add_col_sums(&mut lg.bq, &dq);
        lg.wk.add_scaled(&lc.norm1_out.matmul_tn(&dk), 1.0);
        add_col_sums(&mut lg.bk, &dk);
        lg.wv.add_scaled(&lc.norm1_out.matmul_tn(&dv), 1.0);
        add_col_sums(&mut lg.bv, &dv);
        let mut dnorm1_out = dq.matmul_nt(&layer.wq);
        dnorm1_out.add_scaled(&dk.matmul_nt(&layer.wk), 1.0);
        dnorm1_out.add_scaled(&dv.matmul_nt(&layer.wv), 1.0);
        let dx_from_norm1 =
            rmsnorm_backward(&lc.x_in, &layer.norm1, &lc.rms1, &dnorm1_out, &mut lg.norm1);
        dx_in.add_scaled(&dx_from_norm1, 1.0);

        dx = dx_in;
    }

    // tokens: row 0 is the CLS parameter, rows 1.. are embedded patches
    axpy(&mut grads.cls_token, dx.row(0), 1.0);
    let n = cache.patches.rows;
    let mut demb = Mat::zeros(n, cfg.d_model);
    for r in 0..n {
        demb.row_mut(r).copy_from_slice(dx.row(r + 1));
    }
    grads
        .patch_embed
        .add_scaled(&cache.patches.matmul_tn(&demb), 1.0);
    add_col_sums(&mut grads.patch_bias, &demb);

    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{
        amg_attention, encode, EncoderConfig, GuidanceHeads, GuidanceMode, HighBranch,
        RegionGuidanceParams,
    };
    use crate::linalg::dot;
    use crate::numerics::{close_rel, finite_diff_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            d_in: 4,
            d_model: 16,
            d_h: 8,
            d_ff: 16,
            layers: 2,
            heads: 2,
        }
    }

    fn random_patches(rng: &mut ChaCha8Rng, n: usize, d_in: usize) -> Mat {
        Mat::from_fn(n, d_in, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn rg_default() -> RegionGuidanceParams {
        RegionGuidanceParams::default()
    }

    /// Scalarized loss a·z + b·h used by the finite-difference sweeps.
    fn scalar_loss(
        params: &EncoderParams,
        patches: &Mat,
        pooled: Option<&[f64]>,
        rg: &RegionGuidanceParams,
        a: &[f64],
        b: &[f64],
    ) -> f64 {
        let (out, _) = encode(patches, pooled, params, rg).unwrap();
        dot(a, &out.z) + dot(b, &out.h)
    }

    #[test]
    fn gradients_match_finite_differences_on_every_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = small_config();
        let params = EncoderParams::init(cfg, &mut rng).unwrap();
        let patches = random_patches(&mut rng, 4, cfg.d_in); // 2x2 grid
        let pooled = vec![0.05, 0.3, 0.5, 0.9]; // spans all three guidance branches
        let rg = rg_default();
        let a: Vec<f64> = (0..cfg.d_model)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let b: Vec<f64> = (0..cfg.d_h)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();

        let (_, cache) = encode(&patches, Some(&pooled), &params, &rg).unwrap();
        let analytic = encoder_backward(&params, &cache, &a, &b).unwrap().flatten();

        let flat = params.flatten();
        let mut probe = params.clone();
        let numeric = finite_diff_grad(
            |x| {
                probe.unflatten_into(x).unwrap();
                scalar_loss(&probe, &patches, Some(&pooled), &rg, &a, &b)
            },
            &flat,
            1e-5,
        )
        .unwrap();

        let mut worst = 0.0;
        for (i, (&g, &n)) in analytic.iter().zip(&numeric).enumerate() {
            assert!(
                close_rel(g, n, 1e-4, 1e-6),
                "coordinate {i}: analytic {g}, numeric {n}"
            );
            let denom = g.abs().max(n.abs()).max(1e-6);
            worst = f64::max(worst, (g - n).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_config();
        let params = EncoderParams::init(cfg, &mut rng).unwrap();
        let patches = random_patches(&mut rng, 4, cfg.d_in);
        let (_, cache) = encode(&patches, None, &params, &rg_default()).unwrap();
        let grads = encoder_backward(
            &params,
            &cache,
            &vec![0.0; cfg.d_model],
            &vec![0.0; cfg.d_h],
        )
        .unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn masked_patch_equals_deleting_the_key_value_pair() {
        // With guidance -inf on patch j (cls_row_only), the CLS attention
        // row must equal a softmax computed with that key/value pair
        // physically absent, and the masked forward must stay
        // differentiable with gradients matching finite differences.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = EncoderConfig {
            layers: 1,
            ..small_config()
        };
        let params = EncoderParams::init(cfg, &mut rng).unwrap();
        let patches = random_patches(&mut rng, 4, cfg.d_in);
        let rg = RegionGuidanceParams {
            high_branch: HighBranch::HardMask,
            ..rg_default()
        };
        let masked_j = 2;
        let mut pooled = vec![0.0; 4];
        pooled[masked_j] = 0.95; // above tau2 -> -inf under HardMask

        let (out, cache) = encode(&patches, Some(&pooled), &params, &rg).unwrap();
        for head_row in &out.attention_cls {
            assert_eq!(head_row[masked_j + 1], 0.0);
            let live: f64 = head_row.iter().sum();
            assert!((live - 1.0).abs() < 1e-9);
        }

        // dense oracle: recompute the CLS row over the reduced key set
        let lc = &cache.layers[0];
        let dh = cfg.head_dim();
        for head in 0..cfg.heads {
            let col0 = head * dh;
            let mut logits = Vec::new();
            let mut cols = Vec::new();
            for col in 0..5 {
                if col == masked_j + 1 {
                    continue;
                }
                let mut acc = 0.0;
                for j in 0..dh {
                    acc += lc.attn.q.get(0, col0 + j) * lc.attn.k.get(col, col0 + j);
                }
                let mut logit = acc / (dh as f64).sqrt();
                if col > 0 {
                    logit += crate::encoder::region_guidance(pooled[col - 1], &rg).unwrap();
                }
                logits.push(logit);
                cols.push(col);
            }
            let sm = crate::numerics::softmax(&logits, 1.0).unwrap();
            for (w, &col) in sm.probs().iter().zip(&cols) {
                assert!(
                    (w - out.attention_cls[head][col]).abs() < 1e-12,
                    "head {head} col {col}"
                );
            }
        }

        // gradients through the masked forward match finite differences
        let a: Vec<f64> = (0..cfg.d_model)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let b: Vec<f64> = (0..cfg.d_h)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let analytic = encoder_backward(&params, &cache, &a, &b).unwrap().flatten();
        let flat = params.flatten();
        let mut probe = params.clone();
        let numeric = finite_diff_grad(
            |x| {
                probe.unflatten_into(x).unwrap();
                scalar_loss(&probe, &patches, Some(&pooled), &rg, &a, &b)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        for (i, (&g, &n)) in analytic.iter().zip(&numeric).enumerate() {
            assert!(close_rel(g, n, 1e-4, 1e-6), "coordinate {i}: {g} vs {n}");
        }
    }

    #[test]
    fn upstream_shape_mismatch_is_invalid_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small_config();
        let params = EncoderParams::init(cfg, &mut rng).unwrap();
        let patches = random_patches(&mut rng, 4, cfg.d_in);
        let (_, cache) = encode(&patches, None, &params, &rg_default()).unwrap();
        assert!(encoder_backward(&params, &cache, &[0.0; 3], &[0.0; 8]).is_err());
    }

    #[test]
    fn zero_guidance_is_the_additive_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = small_config();
        let params = EncoderParams::init(cfg, &mut rng).unwrap();
        let patches = random_patches(&mut rng, 4, cfg.d_in);
        let rg = rg_default();
        let (with_none, _) = encode(&patches, None, &params, &rg).unwrap();
        let (with_zeros, _) = encode(&patches, Some(&[0.0; 4]), &params, &rg).unwrap();
        assert_eq!(with_none, with_zeros);

        // and at the attention level: both injection modes collapse to the
        // same vanilla attention when the guidance vector is zero
        let tokens = Mat::from_fn(5, cfg.d_model, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cls_only = amg_attention(
            &tokens,
            &[0.0; 4],
            &params.layers[0],
            cfg.heads,
            GuidanceMode::ClsRowOnly,
            GuidanceHeads::All,
        )
        .unwrap();
        let all_rows = amg_attention(
            &tokens,
            &[0.0; 4],
            &params.layers[0],
            cfg.heads,
            GuidanceMode::AllTokens,
            GuidanceHeads::All,
        )
        .unwrap();
        assert_eq!(cls_only.data, all_rows.data);
    }
}
