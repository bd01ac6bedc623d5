//! Hyperspherical prototype head: one unit direction per class, vMF
//! posterior over cosine logits, temperature sharpening, and the
//! teacher–student state with EMA updates.

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, Mat};
use crate::numerics::{normalize_unit, softmax, Simplex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Temperature set used across the posterior, sharpening, contrastive,
/// separation, and entropy terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    /// Posterior temperature (vMF concentration is 1/tau).
    pub tau: f64,
    /// Teacher sharpening temperature.
    pub tau_sup: f64,
    /// Student posterior temperature.
    pub tau_stu: f64,
    /// Contrastive temperature.
    pub tau_c: f64,
    /// Prototype separation temperature.
    pub tau_sep: f64,
    /// Posterior temperature inside the marginal entropy term.
    pub tau_base: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures {
            tau: 0.1,
            tau_sup: 0.07,
            tau_stu: 0.1,
            tau_c: 0.2,
            tau_sep: 0.1,
            tau_base: 1.0,
        }
    }
}

impl Temperatures {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau", self.tau),
            ("tau_sup", self.tau_sup),
            ("tau_stu", self.tau_stu),
            ("tau_c", self.tau_c),
            ("tau_sep", self.tau_sep),
            ("tau_base", self.tau_base),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid_argument(format!(
                    "temperature {name} = {v} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// K = k_base + k_new + 1 unit prototypes of dimension d; the last row is
/// the normal class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    /// K × d, one unit row per class.
    pub mu: Mat,
    pub k_base: usize,
    pub k_new: usize,
}

impl PrototypeSet {
    pub fn k(&self) -> usize {
        self.k_base + self.k_new + 1
    }

    pub fn dim(&self) -> usize {
        self.mu.cols
    }

    pub fn normal_index(&self) -> usize {
        self.k() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.rows != self.k() {
            return Err(Error::InvalidState(format!(
                "prototype matrix has {} rows, expected K = {}",
                self.mu.rows,
                self.k()
            )));
        }
        for c in 0..self.mu.rows {
            let n = norm2(self.mu.row(c));
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidState(format!(
                    "prototype {c} has norm {n}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Projects every prototype back onto the unit sphere. Called after
    /// each optimizer step and after EMA blends.
    pub fn renormalize(&mut self) -> Result<()> {
        for c in 0..self.mu.rows {
            let unit = normalize_unit(self.mu.row(c))?;
            self.mu.row_mut(c).copy_from_slice(&unit);
        }
        Ok(())
    }
}

fn check_unit(z: &[f64]) -> Result<()> {
    let n = norm2(z);
    if (n - 1.0).abs() > 1e-8 {
        return Err(Error::invalid_argument(format!(
            "feature must be unit-norm, got ‖z‖ = {n}"
        )));
    }
    Ok(())
}

/// Cosine logits: entry c is μ_c · z, each in [-1, 1].
pub fn logits(z: &[f64], protos: &PrototypeSet) -> Result<Vec<f64>> {
    check_unit(z)?;
    if z.len() != protos.dim() {
        return Err(Error::invalid_argument(format!(
            "feature dim {} does not match prototype dim {}",
            z.len(),
            protos.dim()
        )));
    }
    Ok((0..protos.mu.rows)
        .map(|c| dot(protos.mu.row(c), z))
        .collect())
}

/// vMF posterior over classes. Identical to the ratio of vMF densities at
/// concentration 1/tau because the normalization constant cancels.
pub fn vmf_posterior(z: &[f64], protos: &PrototypeSet, tau: f64) -> Result<Simplex> {
    softmax(&logits(z, protos)?, tau)
}

/// q_k^{1/τ} / Σ_c q_c^{1/τ}, computed in log space; exact zeros stay zero.
pub fn sharpen(q: &Simplex, temperature: f64) -> Result<Simplex> {
    if !(temperature > 0.0) {
        return Err(Error::invalid_argument(format!(
            "sharpening temperature {temperature} must be positive"
        )));
    }
    let log_scaled: Vec<f64> = q
        .probs()
        .iter()
        .map(|&p| {
            if p == 0.0 {
                f64::NEG_INFINITY
            } else {
                p.ln() / temperature
            }
        })
        .collect();
    softmax(&log_scaled, 1.0)
}

/// Initializes the prototype set. Base and normal prototypes come from
/// unit-normalized labeled class means when supplied (`class_means[c]` for
/// model class index c), otherwise random directions. Novel prototypes are
/// random unit vectors re-drawn until pairwise |cos| ≤ 0.5 among
/// themselves.
pub fn init_prototypes(
    k_base: usize,
    k_new: usize,
    d: usize,
    seed: u64,
    class_means: &[Option<Vec<f64>>],
) -> Result<PrototypeSet> {
    let k = k_base + k_new + 1;
    if d == 0 {
        return Err(Error::invalid_argument("prototype dimension must be positive"));
    }
    if !class_means.is_empty() && class_means.len() != k {
        return Err(Error::invalid_argument(format!(
            "class_means has {} entries, expected {k} or none",
            class_means.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let g: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            if let Ok(u) = normalize_unit(&g) {
                return u;
            }
        }
    };

    let mut mu = Mat::zeros(k, d);
    // base classes and the normal class (indices outside the novel block)
    for c in (0..k_base).chain([k - 1]) {
        let row = match class_means.get(c).and_then(|m| m.as_ref()) {
            Some(mean) => normalize_unit(mean)?,
            None => random_unit(&mut rng),
        };
        mu.row_mut(c).copy_from_slice(&row);
    }
    // novel prototypes with a pairwise cosine bound, by rejection
    const MAX_ATTEMPTS: usize = 1000;
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(k_new);
    for j in 0..k_new {
        let mut ok = None;
        for _ in 0..MAX_ATTEMPTS {
            let cand = random_unit(&mut rng);
            if accepted.iter().all(|prev| dot(prev, &cand).abs() <= 0.5) {
                ok = Some(cand);
                break;
            }
        }
        let cand = ok.ok_or_else(|| {
            Error::InitFailure(format!(
                "could not draw novel prototype {j} with pairwise |cos| <= 0.5 in {MAX_ATTEMPTS} attempts (d = {d})"
            ))
        })?;
        mu.row_mut(k_base + j).copy_from_slice(&cand);
        accepted.push(mu.row(k_base + j).to_vec());
    }

    let protos = PrototypeSet { mu, k_base, k_new };
    protos.validate()?;
    Ok(protos)
}

/// Full trainable state: encoder plus prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub protos: PrototypeSet,
}

impl ModelParams {
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = self.encoder.flatten();
        flat.extend_from_slice(&self.protos.mu.data);
        flat
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.protos.mu.data.len()
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) -> Result<()> {
        let enc_len = self.encoder.param_count();
        if flat.len() != self.param_count() {
            return Err(Error::InvalidState(format!(
                "flat model vector has length {}, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        self.encoder.unflatten_into(&flat[..enc_len])?;
        self.protos.mu.data.copy_from_slice(&flat[enc_len..]);
        Ok(())
    }
}

/// Teacher–student pair sharing one architecture. The teacher follows the
/// student through an exponential moving average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherStudentState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    /// EMA momentum m in [0, 1): teacher ← m·teacher + (1-m)·student.
    pub momentum: f64,
}

impl TeacherStudentState {
    pub fn new(student: ModelParams, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid_argument(format!(
                "EMA momentum {momentum} must lie in [0, 1)"
            )));
        }
        Ok(TeacherStudentState {
            teacher: student.clone(),
            student,
            momentum,
        })
    }

    /// One EMA step; teacher prototypes are re-normalized afterwards so
    /// they stay on the sphere.
    pub fn ema_update(&mut self) -> Result<()> {
        let student_flat = self.student.flatten();
        let teacher_flat = self.teacher.flatten();
        if student_flat.len() != teacher_flat.len() {
            return Err(Error::InvalidState(
                "teacher and student parameter shapes differ".into(),
            ));
        }
        let m = self.momentum;
        let blended: Vec<f64> = teacher_flat
            .iter()
            .zip(&student_flat)
            .map(|(&t, &s)| m * t + (1.0 - m) * s)
            .collect();
        self.teacher.unflatten_into(&blended)?;
        self.teacher.protos.renormalize()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::numerics::{log_sum_exp, vmf_log_normalizer};

    fn unit(v: Vec<f64>) -> Vec<f64> {
        normalize_unit(&v).unwrap()
    }

    fn orthogonal_protos(k_base: usize, k_new: usize, d: usize) -> PrototypeSet {
        let k = k_base + k_new + 1;
        assert!(d >= k);
        let mu = Mat::from_fn(k, d, |i, j| f64::from(i == j));
        PrototypeSet { mu, k_base, k_new }
    }

    #[test]
    fn logits_of_aligned_vector() {
        let protos = orthogonal_protos(1, 1, 4);
        let z = protos.mu.row(1).to_vec();
        let l = logits(&z, &protos).unwrap();
        assert_eq!(l, vec![0.0, 1.0, 0.0]);
        assert!(logits(&[0.5, 0.0, 0.0, 0.0], &protos).is_err());
    }

    #[test]
    fn logits_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let protos = init_prototypes(2, 2, 8, 5, &[]).unwrap();
        let z = unit((0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
        let l = logits(&z, &protos).unwrap();
        for (c, &lc) in l.iter().enumerate() {
            let direct: f64 = (0..8).map(|j| protos.mu.get(c, j) * z[j]).sum();
            assert!((lc - direct).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&lc));
        }
    }

    #[test]
    fn posterior_uniform_for_identical_prototypes() {
        let row = unit(vec![1.0, 2.0, -1.0, 0.5]);
        let mut mu = Mat::zeros(4, 4);
        for c in 0..4 {
            mu.row_mut(c).copy_from_slice(&row);
        }
        let protos = PrototypeSet {
            mu,
            k_base: 2,
            k_new: 1,
        };
        let z = unit(vec![0.3, -0.2, 0.9, 0.1]);
        let p = vmf_posterior(&z, &protos, 0.3).unwrap();
        for &x in p.probs() {
            assert!((x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_sharpening_limit_is_one_hot() {
        let protos = orthogonal_protos(1, 1, 4);
        let z = unit(vec![0.9, 0.3, 0.1, 0.0]);
        let p = vmf_posterior(&z, &protos, 1e-4).unwrap();
        assert_eq!(p.argmax(), 0);
        assert!(p.probs()[0] > 1.0 - 1e-12);
    }

    #[test]
    fn posterior_equals_vmf_density_ratio() {
        // the normalization constant C_d(1/tau) cancels in the ratio
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &d in &[3usize, 8] {
            let protos = init_prototypes(1, d.min(4) - 2, d, 99, &[]).unwrap();
            let tau = 0.25;
            let kappa = 1.0 / tau;
            for _ in 0..20 {
                let z = unit((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
                let posterior = vmf_posterior(&z, &protos, tau).unwrap();
                let log_c = vmf_log_normalizer(d, kappa).unwrap();
                let log_densities: Vec<f64> = (0..protos.k())
                    .map(|c| log_c + kappa * dot(protos.mu.row(c), &z))
                    .collect();
                let log_norm = log_sum_exp(&log_densities).unwrap();
                for (c, &ld) in log_densities.iter().enumerate() {
                    let ratio = (ld - log_norm).exp();
                    assert!(
                        (ratio - posterior.probs()[c]).abs() < 1e-9,
                        "d={d} class {c}: ratio {ratio} vs posterior {}",
                        posterior.probs()[c]
                    );
                }
            }
        }
    }

    #[test]
    fn posterior_argmax_invariant_in_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let protos = init_prototypes(2, 1, 8, 1, &[]).unwrap();
        for _ in 0..30 {
            let z = unit((0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
            let l = logits(&z, &protos).unwrap();
            let argmax_logits = l
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            for tau in [1e-3, 0.1, 1.0, 10.0] {
                assert_eq!(vmf_posterior(&z, &protos, tau).unwrap().argmax(), argmax_logits);
            }
        }
    }

    #[test]
    fn sharpen_identity_and_symmetry() {
        let q = Simplex::new(vec![0.1, 0.6, 0.3]).unwrap();
        let s = sharpen(&q, 1.0).unwrap();
        for (a, b) in s.probs().iter().zip(q.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
        let u = Simplex::uniform(5);
        let s = sharpen(&u, 0.3).unwrap();
        for &x in s.probs() {
            assert!((x - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn sharpen_direct_formula() {
        let q = Simplex::new(vec![0.6, 0.4]).unwrap();
        let s = sharpen(&q, 0.5).unwrap();
        // squares renormalized: 0.36 / 0.52, 0.16 / 0.52
        assert!((s.probs()[0] - 0.6923076923076923).abs() < 1e-12);
        assert!((s.probs()[1] - 0.3076923076923077).abs() < 1e-12);
        // exact zeros survive
        let q = Simplex::new(vec![0.0, 1.0]).unwrap();
        let s = sharpen(&q, 0.5).unwrap();
        assert_eq!(s.probs()[0], 0.0);
        assert_eq!(s.probs()[1], 1.0);
    }

    #[test]
    fn init_uses_labeled_means_and_bounds_novel_cosines() {
        let mean = vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut means: Vec<Option<Vec<f64>>> = vec![None; 4]; // k_base=1, k_new=2, K=4
        means[0] = Some(mean);
        let protos = init_prototypes(1, 2, 8, 7, &means).unwrap();
        assert_eq!(protos.mu.row(0), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        for seed in 0..100u64 {
            let p = init_prototypes(1, 3, 8, seed, &[]).unwrap();
            for a in 0..3 {
                for b in a + 1..3 {
                    let cos = dot(p.mu.row(1 + a), p.mu.row(1 + b));
                    assert!(cos.abs() <= 0.5 + 1e-12, "seed {seed}: |cos| = {}", cos.abs());
                }
            }
        }
        // reproducibility
        let a = init_prototypes(2, 2, 8, 42, &[]).unwrap();
        let b = init_prototypes(2, 2, 8, 42, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rejection_can_fail_in_low_dimension() {
        // one dimension cannot host several novel directions at |cos| <= 0.5
        let result = init_prototypes(0, 3, 1, 0, &[]);
        assert!(matches!(result, Err(Error::InitFailure(_))));
    }

    fn tiny_state(seed: u64) -> TeacherStudentState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EncoderConfig {
            d_in: 3,
            d_model: 8,
            d_h: 4,
            d_ff: 8,
            layers: 1,
            heads: 2,
        };
        let encoder = EncoderParams::init(cfg, &mut rng).unwrap();
        let protos = init_prototypes(1, 1, 8, seed, &[]).unwrap();
        TeacherStudentState::new(ModelParams { encoder, protos }, 0.9).unwrap()
    }

    #[test]
    fn ema_momentum_zero_copies_student() {
        let mut state = tiny_state(1);
        state.momentum = 0.0;
        // perturb the student so teacher and student differ
        let mut flat = state.student.flatten();
        for v in flat.iter_mut() {
            *v += 0.25;
        }
        state.student.unflatten_into(&flat).unwrap();
        state.student.protos.renormalize().unwrap();
        state.ema_update().unwrap();
        assert_eq!(state.teacher, state.student);
    }

    #[test]
    fn ema_fixed_point_and_closed_form() {
        let mut state = tiny_state(2);
        let before = state.teacher.clone();
        state.ema_update().unwrap();
        assert_eq!(state.teacher, before); // student == teacher is a fixed point

        // constant student, three steps: encoder params follow the
        // m³-weighted closed-form blend
        let mut state = tiny_state(3);
        let teacher0 = state.teacher.encoder.flatten();
        let mut flat = state.student.flatten();
        for v in flat.iter_mut() {
            *v -= 0.125;
        }
        state.student.unflatten_into(&flat).unwrap();
        state.student.protos.renormalize().unwrap();
        let student_enc = state.student.encoder.flatten();
        for _ in 0..3 {
            state.ema_update().unwrap();
        }
        let m3 = 0.9f64.powi(3);
        let got = state.teacher.encoder.flatten();
        for ((&g, &t0), &s) in got.iter().zip(&teacher0).zip(&student_enc) {
            let want = m3 * t0 + (1.0 - m3) * s;
            assert!((g - want).abs() < 1e-12);
        }
        // prototypes stay unit after every step
        state.teacher.protos.validate().unwrap();
    }
}
