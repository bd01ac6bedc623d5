//! Synthetic generators. Both are pure functions of their seed and double
//! as ground-truth oracles for the end-to-end benchmarks: the vMF mixture
//! matches the hyperspherical model class the prototype head assumes, and
//! the toy-image generator produces patch grids with implanted local
//! anomaly patterns plus aligned anomaly maps.

use super::{ClassLabel, Dataset, PixelGrid, Sample, Split};
use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use crate::numerics::normalize_unit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

/// Mixture of vMF clusters on S^{d_in - 1}, embedded as 1×1 patch grids.
#[derive(Debug, Clone)]
pub struct VmfMixtureSpec {
    pub k_base: usize,
    pub k_new: usize,
    /// Extra held-out classes emitted with the `ood` split and no label.
    pub n_ood_classes: usize,
    pub d_in: usize,
    pub kappa: f64,
    pub n_per_class: usize,
    pub seed: u64,
}

/// Draws one vMF sample with mean direction `mu` and concentration
/// `kappa` using Wood's rejection scheme: the cosine `w` against `mu`
/// comes from an envelope built on a symmetric Beta variate, and the
/// tangent component is uniform on the orthogonal sphere.
pub fn sample_vmf<R: Rng>(rng: &mut R, mu: &[f64], kappa: f64) -> Vec<f64> {
    let d = mu.len();
    debug_assert!(d >= 2);
    let dm1 = (d - 1) as f64;
    let w = if kappa == 0.0 {
        // uniform on the sphere: w has density ∝ (1-w²)^{(d-3)/2}
        let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("valid beta");
        2.0 * beta.sample(rng) - 1.0
    } else {
        // written with the conjugate form to avoid cancellation at large kappa
        let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
        let x0 = (1.0 - b) / (1.0 + b);
        let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
        let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("valid beta");
        loop {
            let z: f64 = beta.sample(rng);
            let u: f64 = rng.random();
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        }
    };
    // tangent direction: Gaussian projected off mu, normalized
    let v = loop {
        let mut g: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let proj = dot(&g, mu);
        for (gi, &mi) in g.iter_mut().zip(mu) {
            *gi -= proj * mi;
        }
        if let Ok(unit) = normalize_unit(&g) {
            break unit;
        }
    };
    let tangent = (1.0 - w * w).max(0.0).sqrt();
    mu.iter()
        .zip(&v)
        .map(|(&m, &t)| w * m + tangent * t)
        .collect()
}

/// Random orthonormal directions via Gram–Schmidt on Gaussian draws.
fn orthonormal_directions<R: Rng>(rng: &mut R, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while dirs.len() < count {
        let mut g: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for prev in &dirs {
            let proj = dot(&g, prev);
            for (gi, &pi) in g.iter_mut().zip(prev) {
                *gi -= proj * pi;
            }
        }
        if let Ok(unit) = normalize_unit(&g) {
            dirs.push(unit);
        }
    }
    dirs
}

pub fn synth_vmf_mixture(spec: &VmfMixtureSpec) -> Result<Dataset> {
    let k_classes = spec.k_base + spec.k_new + spec.n_ood_classes;
    if spec.k_base + spec.k_new < 2 {
        return Err(Error::invalid_argument(
            "vMF mixture needs at least 2 classes",
        ));
    }
    if spec.n_per_class < 1 {
        return Err(Error::invalid_argument("n_per_class must be at least 1"));
    }
    if spec.d_in < k_classes {
        return Err(Error::invalid_argument(format!(
            "d_in = {} cannot hold {} near-orthogonal mean directions",
            spec.d_in, k_classes
        )));
    }
    if !(spec.kappa > 0.0) {
        return Err(Error::invalid_argument("kappa must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = orthonormal_directions(&mut rng, k_classes, spec.d_in);

    let mut samples = Vec::with_capacity(k_classes * spec.n_per_class);
    for class in 0..k_classes {
        let (split, label, tag) = if class < spec.k_base {
            (Split::Labeled, Some(ClassLabel::Base { index: class }), "b")
        } else if class < spec.k_base + spec.k_new {
            let j = class - spec.k_base;
            (Split::Unlabeled, Some(ClassLabel::Novel { index: j }), "n")
        } else {
            (Split::Ood, None, "o")
        };
        for i in 0..spec.n_per_class {
            let z = sample_vmf(&mut rng, &means[class], spec.kappa);
            let patches = Mat::from_rows(vec![z]);
            // every mixture sample is a whole-image anomaly crop, so it
            // carries a saturated anomaly map
            let map = PixelGrid::constant(1, 1, 1.0);
            samples.push(Sample::new(
                format!("vmf-{tag}{class}-{i:04}"),
                split,
                label,
                patches,
                Some(map),
                None,
            ));
        }
    }

    let ds = Dataset {
        samples,
        k_base: spec.k_base,
        k_new_true: Some(spec.k_new),
        d_in: spec.d_in,
        p: 1,
        h: 1,
        w: 1,
    };
    ds.validate()?;
    Ok(ds)
}

/// Patch-grid "images" with a textured background, an object region given
/// by a foreground mask, and one implanted local anomaly pattern per type.
#[derive(Debug, Clone)]
pub struct ToyImageSpec {
    pub k_anomaly_types: usize,
    /// How many of the anomaly types are labeled base classes.
    pub k_base: usize,
    /// Patch grid side.
    pub p: usize,
    pub pixels_per_patch: usize,
    pub d_in: usize,
    /// Implant side length in patches.
    pub implant_patches: usize,
    pub n_per_type: usize,
    pub n_normal: usize,
    pub seed: u64,
}

impl Default for ToyImageSpec {
    fn default() -> Self {
        ToyImageSpec {
            k_anomaly_types: 3,
            k_base: 1,
            p: 8,
            pixels_per_patch: 4,
            d_in: 8,
            implant_patches: 2,
            n_per_type: 20,
            n_normal: 20,
            seed: 0,
        }
    }
}

/// Per-type implant anchors: slots tile the object interior row-major and
/// type `k` takes slot `k` (mod slot count). Slots are spaced two patches
/// wider than the implant so the one-pixel blur rings of distinct types
/// stay disjoint even after pooling.
fn implant_anchor(spec: &ToyImageSpec, class: usize) -> (usize, usize) {
    let lo = 1; // object region starts one patch in from the border
    let hi = spec.p - 1 - spec.implant_patches; // inclusive upper anchor
    let step = spec.implant_patches + 2;
    let per_side = (hi - lo) / step + 1;
    let slot = class % (per_side * per_side);
    (lo + (slot / per_side) * step, lo + (slot % per_side) * step)
}

fn box_blur_3x3(grid: &PixelGrid) -> PixelGrid {
    let mut out = PixelGrid::zeros(grid.h, grid.w);
    for r in 0..grid.h {
        for c in 0..grid.w {
            let mut sum = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = r as i64 + dr;
                    let cc = c as i64 + dc;
                    if rr >= 0 && cc >= 0 && (rr as usize) < grid.h && (cc as usize) < grid.w {
                        sum += grid.get(rr as usize, cc as usize);
                    }
                }
            }
            out.set(r, c, (sum / 9.0).clamp(0.0, 1.0));
        }
    }
    out
}

pub fn synth_toy_images(spec: &ToyImageSpec) -> Result<Dataset> {
    if spec.p < 4 {
        return Err(Error::invalid_argument("patch grid side must be >= 4"));
    }
    if spec.k_anomaly_types < 2 {
        return Err(Error::invalid_argument("need at least 2 anomaly types"));
    }
    if spec.k_base > spec.k_anomaly_types {
        return Err(Error::invalid_argument(
            "k_base cannot exceed the anomaly type count",
        ));
    }
    if spec.implant_patches == 0 || spec.implant_patches > spec.p - 2 {
        return Err(Error::invalid_argument(
            "implant larger than the object region",
        ));
    }
    if spec.d_in < spec.k_anomaly_types + 2 {
        return Err(Error::invalid_argument(format!(
            "d_in = {} too small for {} anomaly directions plus background and object",
            spec.d_in, spec.k_anomaly_types
        )));
    }
    if spec.pixels_per_patch == 0 {
        return Err(Error::invalid_argument("pixels_per_patch must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dirs = orthonormal_directions(&mut rng, spec.k_anomaly_types + 2, spec.d_in);
    let (dir_bg, dir_obj, dir_types) = (&dirs[0], &dirs[1], &dirs[2..]);

    let px = spec.pixels_per_patch;
    let (h, w) = (spec.p * px, spec.p * px);
    let feature_noise = 0.15;

    // object region: everything one patch in from the border
    let in_object = |r: usize, c: usize| {
        r >= 1 && r < spec.p - 1 && c >= 1 && c < spec.p - 1
    };

    let mut foreground = PixelGrid::zeros(h, w);
    for r in 0..spec.p {
        for c in 0..spec.p {
            if in_object(r, c) {
                for rr in r * px..(r + 1) * px {
                    for cc in c * px..(c + 1) * px {
                        foreground.set(rr, cc, 1.0);
                    }
                }
            }
        }
    }

    let mut make_patches = |implant: Option<(usize, usize, usize)>| -> Mat {
        let mut patches = Mat::zeros(spec.p * spec.p, spec.d_in);
        for r in 0..spec.p {
            for c in 0..spec.p {
                let base = match implant {
                    Some((class, ar, ac))
                        if r >= ar
                            && r < ar + spec.implant_patches
                            && c >= ac
                            && c < ac + spec.implant_patches =>
                    {
                        &dir_types[class]
                    }
                    _ if in_object(r, c) => dir_obj,
                    _ => dir_bg,
                };
                let row = patches.row_mut(r * spec.p + c);
                for (j, &b) in base.iter().enumerate() {
                    row[j] = b + feature_noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        patches
    };

    let mut samples = Vec::new();
    for class in 0..spec.k_anomaly_types {
        let (ar, ac) = implant_anchor(spec, class);
        let (split, label, tag) = if class < spec.k_base {
            (Split::Labeled, Some(ClassLabel::Base { index: class }), "b")
        } else {
            let j = class - spec.k_base;
            (Split::Unlabeled, Some(ClassLabel::Novel { index: j }), "n")
        };
        for i in 0..spec.n_per_type {
            let patches = make_patches(Some((class, ar, ac)));
            let mut footprint = PixelGrid::zeros(h, w);
            for rr in ar * px..(ar + spec.implant_patches) * px {
                for cc in ac * px..(ac + spec.implant_patches) * px {
                    footprint.set(rr, cc, 1.0);
                }
            }
            let map = box_blur_3x3(&footprint);
            samples.push(Sample::new(
                format!("toy-{tag}{class}-{i:04}"),
                split,
                label,
                patches,
                Some(map),
                Some(foreground.clone()),
            ));
        }
    }
    for i in 0..spec.n_normal {
        let patches = make_patches(None);
        samples.push(Sample::new(
            format!("toy-norm-{i:04}"),
            Split::Unlabeled,
            Some(ClassLabel::Normal),
            patches,
            Some(PixelGrid::zeros(h, w)),
            Some(foreground.clone()),
        ));
    }

    let ds = Dataset {
        samples,
        k_base: spec.k_base,
        k_new_true: Some(spec.k_anomaly_types - spec.k_base),
        d_in: spec.d_in,
        p: spec.p,
        h,
        w,
    };
    ds.validate()?;
    Ok(ds)
}
