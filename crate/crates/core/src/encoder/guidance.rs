//! Region guidance: pooled anomaly scores -> additive attention-logit
//! offsets.

use super::{HighBranch, RegionGuidanceParams};
use crate::error::{Error, Result};

/// Piecewise guidance value for one pooled anomaly score in [0, 1]:
/// 0 below `tau1`, γ·log(score/τ1) in the band (continuous at τ1), and
/// the configured high branch at or above `tau2`.
pub fn region_guidance(score: f64, params: &RegionGuidanceParams) -> Result<f64> {
    params.validate()?;
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::invalid_argument(format!(
            "anomaly score {score} outside [0, 1]"
        )));
    }
    Ok(if score < params.tau1 {
        0.0
    } else if score < params.tau2 {
        params.gamma * (score / params.tau1).ln()
    } else {
        match params.high_branch {
            HighBranch::Saturate => params.gamma * (params.tau2 / params.tau1).ln(),
            HighBranch::HardMask => f64::NEG_INFINITY,
        }
    })
}

/// Elementwise guidance over a pooled anomaly vector. The CLS position is
/// not part of the vector; attention assigns it offset 0.
pub fn build_guidance_vector(
    anomaly_vec: &[f64],
    params: &RegionGuidanceParams,
) -> Result<Vec<f64>> {
    anomaly_vec
        .iter()
        .map(|&s| region_guidance(s, params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{GuidanceHeads, GuidanceMode};

    fn params(high: HighBranch) -> RegionGuidanceParams {
        RegionGuidanceParams {
            tau1: 0.2,
            tau2: 0.6,
            gamma: 1.5,
            mode: GuidanceMode::ClsRowOnly,
            high_branch: high,
            heads: GuidanceHeads::All,
        }
    }

    #[test]
    fn low_branch_is_zero() {
        let p = params(HighBranch::Saturate);
        assert_eq!(region_guidance(0.1, &p).unwrap(), 0.0);
        assert_eq!(region_guidance(0.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn continuous_at_tau1() {
        let p = params(HighBranch::Saturate);
        assert_eq!(region_guidance(0.2, &p).unwrap(), 0.0);
        // just above tau1 the band value is near zero
        let eps = region_guidance(0.2 + 1e-9, &p).unwrap();
        assert!(eps > 0.0 && eps < 1e-7);
    }

    #[test]
    fn band_matches_direct_formula() {
        let p = params(HighBranch::Saturate);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..50 {
            let s = 0.2 + (0.6 - 0.2) * (i as f64 + 0.5) / 50.0;
            let got = region_guidance(s, &p).unwrap();
            let want = 1.5 * (s / 0.2).ln();
            assert!((got - want).abs() < 1e-12);
            // monotone in the band
            assert!(got > prev);
            prev = got;
        }
    }

    #[test]
    fn high_branch_variants() {
        assert_eq!(
            region_guidance(0.8, &params(HighBranch::Saturate)).unwrap(),
            1.5 * (0.6f64 / 0.2).ln()
        );
        assert_eq!(
            region_guidance(0.8, &params(HighBranch::HardMask)).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn rejects_out_of_range_scores() {
        let p = params(HighBranch::Saturate);
        assert!(region_guidance(-0.1, &p).is_err());
        assert!(region_guidance(1.1, &p).is_err());
    }

    #[test]
    fn zero_vector_gives_zero_guidance() {
        let p = params(HighBranch::Saturate);
        let g = build_guidance_vector(&[0.0; 9], &p).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }
}
