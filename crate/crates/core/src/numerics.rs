//! Scalar and vector primitives shared by every module.
//!
//! All routines are pure `f64` functions. Negative infinity is accepted as a
//! first-class mask value by [`log_sum_exp`] and [`softmax`] (it encodes a
//! suppressed attention logit); every other entry point rejects non-finite
//! input.

use crate::error::{Error, Result};

/// Validation tolerance for simplex sums and unit norms.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Switch point between the ascending Bessel series and the large-argument
/// asymptotic expansion.
pub const BESSEL_KAPPA_SWITCH: f64 = 50.0;

/// Term count of the ascending series below the switch point. At
/// `kappa = 50` the terms peak near m = 25 and decay geometrically, so 60
/// terms leave truncation error well under 1e-12 relative.
pub const BESSEL_SERIES_TERMS: usize = 60;

/// A point on the probability simplex: entries in [0, 1] summing to 1
/// within [`SIMPLEX_TOL`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Simplex(Vec<f64>);

impl Simplex {
    /// Validates and wraps `probs`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid_argument("simplex must be nonempty"));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&p) {
                return Err(Error::invalid_argument(format!(
                    "simplex entry {i} = {p} outside [0, 1]"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid_argument(format!(
                "simplex sums to {sum}, expected 1"
            )));
        }
        Ok(Simplex(probs))
    }

    /// Clamps tiny negatives to zero and rescales so the entries sum to 1.
    /// Used after arithmetic that can drift (blends, sharpening, averaging).
    pub fn renormalized(mut probs: Vec<f64>) -> Result<Self> {
        let mut sum = 0.0;
        for p in probs.iter_mut() {
            if !p.is_finite() {
                return Err(Error::invalid_argument(format!(
                    "non-finite simplex entry {p}"
                )));
            }
            if *p < 0.0 {
                if *p < -SIMPLEX_TOL {
                    return Err(Error::invalid_argument(format!(
                        "negative simplex entry {p}"
                    )));
                }
                *p = 0.0;
            }
            sum += *p;
        }
        if sum <= 0.0 {
            return Err(Error::DegenerateInput("simplex with zero mass".into()));
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        Ok(Simplex(probs))
    }

    pub fn uniform(dim: usize) -> Self {
        Simplex(vec![1.0 / dim as f64; dim])
    }

    pub fn one_hot(dim: usize, index: usize) -> Self {
        let mut p = vec![0.0; dim];
        p[index] = 1.0;
        Simplex(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.0.len() {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_logits(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid_argument("empty input"));
    }
    for &x in v {
        if x.is_nan() || x == f64::INFINITY {
            return Err(Error::invalid_argument(format!(
                "logit {x} is neither finite nor -inf"
            )));
        }
    }
    Ok(())
}

/// log Σ exp(v_i), shift-stable. Entries may be finite or `-inf`;
/// returns `-inf` when every entry is masked.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    check_logits(v)?;
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    Ok(m + sum.ln())
}

/// Temperature softmax. `-inf` entries map to exactly 0.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Simplex> {
    if !(temperature > 0.0) {
        return Err(Error::invalid_argument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    check_logits(v)?;
    let scaled: Vec<f64> = v.iter().map(|&x| x / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::DegenerateInput(
            "softmax over fully masked logits".into(),
        ));
    }
    let exps: Vec<f64> = scaled.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Simplex(exps.into_iter().map(|e| e / sum).collect()))
}

/// v / ‖v‖₂. The zero vector has no direction and is rejected.
pub fn normalize_unit(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid_argument("empty input"));
    }
    for &x in v {
        if !x.is_finite() {
            return Err(Error::invalid_argument(format!("non-finite entry {x}")));
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateInput(
            "cannot normalize the zero vector".into(),
        ));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// ln Γ(x) for x > 0 (Lanczos approximation, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    debug_assert!(x > 0.0);
    let mut acc = 0.99999999999980993;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (x + i as f64);
    }
    let t = x + 6.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x - 0.5) * t.ln() - t + acc.ln()
}

/// ln I_ν(κ) for ν ≥ 0, κ ≥ 0. Ascending series below
/// [`BESSEL_KAPPA_SWITCH`], large-argument asymptotic expansion above.
/// Working in log space keeps the series usable near the switch point
/// without overflow.
pub fn log_bessel_i(order: f64, kappa: f64) -> Result<f64> {
    if !(order >= 0.0) || !order.is_finite() {
        return Err(Error::invalid_argument(format!(
            "bessel order {order} must be nonnegative"
        )));
    }
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::invalid_argument(format!(
            "bessel argument {kappa} must be nonnegative"
        )));
    }
    if kappa == 0.0 {
        // I_0(0) = 1, I_nu(0) = 0 for nu > 0.
        return Ok(if order == 0.0 { 0.0 } else { f64::NEG_INFINITY });
    }
    if kappa <= BESSEL_KAPPA_SWITCH {
        log_bessel_series(order, kappa)
    } else {
        log_bessel_asymptotic(order, kappa)
    }
}

/// Σ_m (κ/2)^{2m+ν} / (m! Γ(m+ν+1)) accumulated as log-sum-exp.
fn log_bessel_series(order: f64, kappa: f64) -> Result<f64> {
    let log_half_kappa = (kappa / 2.0).ln();
    let mut log_terms = Vec::with_capacity(BESSEL_SERIES_TERMS);
    for m in 0..BESSEL_SERIES_TERMS {
        let mf = m as f64;
        log_terms.push(
            (2.0 * mf + order) * log_half_kappa
                - ln_gamma(mf + 1.0)
                - ln_gamma(mf + order + 1.0),
        );
    }
    log_sum_exp(&log_terms)
}

/// Hankel expansion: I_ν(κ) ≈ e^κ / √(2πκ) · Σ_k (-1)^k a_k(ν) / κ^k with
/// a_k(ν) = Π_{j≤k} (4ν² - (2j-1)²) / (k! 8^k), truncated at the smallest
/// term. Valid once κ clearly dominates ν² (κ > 50 covers every order this
/// library produces, ν = d/2 - 1 for feature dimensions up to a few dozen).
fn log_bessel_asymptotic(order: f64, kappa: f64) -> Result<f64> {
    // For moderately large orders the terms first grow before the
    // factorial decay kicks in, so truncate at the globally smallest term
    // rather than at the first non-decrease.
    let mu = 4.0 * order * order;
    let mut terms = vec![1.0_f64];
    let mut term = 1.0_f64;
    for k in 1..=60 {
        let kf = k as f64;
        term *= -(mu - (2.0 * kf - 1.0).powi(2)) / (8.0 * kappa * kf);
        terms.push(term);
        if term.abs() < 1e-18 {
            break;
        }
    }
    let mut cut = terms.len() - 1;
    for (i, t) in terms.iter().enumerate().skip(1) {
        if t.abs() < terms[cut].abs() {
            cut = i;
        }
    }
    let sum: f64 = terms[..=cut].iter().sum();
    let trunc_err = terms[cut].abs();
    if !(sum > 0.0) || trunc_err > 1e-8 * sum.abs() {
        return Err(Error::NumericalFailure(format!(
            "bessel asymptotic expansion failed for order {order}, kappa {kappa}"
        )));
    }
    Ok(kappa - 0.5 * (2.0 * std::f64::consts::PI * kappa).ln() + sum.ln())
}

/// I_ν(κ). See [`log_bessel_i`] for the branch structure.
pub fn bessel_i(order: f64, kappa: f64) -> Result<f64> {
    log_bessel_i(order, kappa).map(|lv| {
        if lv == f64::NEG_INFINITY {
            0.0
        } else {
            lv.exp()
        }
    })
}

/// log C_d(κ) with C_d(κ) = κ^{d/2-1} / ((2π)^{d/2} I_{d/2-1}(κ)), the
/// normalization constant of the vMF density on S^{d-1}.
pub fn vmf_log_normalizer(d: usize, kappa: f64) -> Result<f64> {
    if d < 2 {
        return Err(Error::invalid_argument(format!(
            "vMF dimension {d} must be at least 2"
        )));
    }
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::invalid_argument(format!(
            "vMF concentration {kappa} must be positive"
        )));
    }
    let half_d = d as f64 / 2.0;
    let log_i = log_bessel_i(half_d - 1.0, kappa)?;
    Ok((half_d - 1.0) * kappa.ln() - half_d * (2.0 * std::f64::consts::PI).ln() - log_i)
}

/// Mean resultant length A_d(κ) = I_{d/2}(κ) / I_{d/2-1}(κ) of a vMF
/// distribution on S^{d-1}.
pub fn vmf_mean_resultant_length(d: usize, kappa: f64) -> Result<f64> {
    let half_d = d as f64 / 2.0;
    Ok((log_bessel_i(half_d, kappa)? - log_bessel_i(half_d - 1.0, kappa)?).exp())
}

/// -Σ p log p with 0·log 0 := 0.
pub fn entropy(p: &Simplex) -> f64 {
    p.probs()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum()
}

/// Central-difference gradient: (f(x + h·e_i) - f(x - h·e_i)) / 2h.
///
/// This is the verification oracle for every analytic gradient in the
/// library. It stays independent of the code paths it checks.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::invalid_argument(format!(
            "step {step} must be positive"
        )));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "finite differences hit a non-finite value at coordinate {i}"
            )));
        }
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Relative-error comparison with an absolute floor, the convention used by
/// every gradient check in this crate.
pub fn close_rel(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    let diff = (a - b).abs();
    diff <= abs_floor || diff <= rel * a.abs().max(b.abs())
}
