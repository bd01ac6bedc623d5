//! Dataset model, on-disk format, anomaly-map pooling, augmentation, and
//! synthetic generators.
//!
//! A [`Sample`] is one inspected item: a `p × p` grid of raw patch feature
//! vectors plus an optional per-pixel anomaly map and foreground mask
//! produced by an upstream detector. Images themselves never enter this
//! library; external tools export to the JSONL format in [`format`].

mod augment;
mod format;
mod pool;
mod synth;

pub use augment::{make_views, AugmentParams, View, ViewPair};
pub use format::{load_dataset, save_dataset};
pub use pool::pool_anomaly_map;
pub use synth::{sample_vmf, synth_toy_images, synth_vmf_mixture, ToyImageSpec, VmfMixtureSpec};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use serde::{Deserialize, Serialize};

/// Which pool a sample belongs to during training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Label visible to training.
    Labeled,
    /// Label (if any) is ground truth for evaluation only.
    Unlabeled,
    /// Held out entirely; used as the negative class for OOD scoring.
    Ood,
}

/// Class identity. Base classes are the labeled anomaly categories, novel
/// classes exist only in the unlabeled pool, and the normal class is the
/// extra category reserved for non-anomalous content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassLabel {
    Base { index: usize },
    Novel { index: usize },
    Normal,
}

impl ClassLabel {
    /// Maps to a model-level class index in `[0, K)` with
    /// `K = k_base + k_new + 1`: base classes first, then novel classes,
    /// normal last.
    pub fn class_index(&self, k_base: usize, k_new: usize) -> usize {
        match *self {
            ClassLabel::Base { index } => index,
            ClassLabel::Novel { index } => k_base + index,
            ClassLabel::Normal => k_base + k_new,
        }
    }
}

/// Per-pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl PixelGrid {
    pub fn zeros(h: usize, w: usize) -> Self {
        PixelGrid {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn constant(h: usize, w: usize, v: f64) -> Self {
        PixelGrid {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.w + c] = v;
    }
}

/// One inspected item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    /// Ground-truth class. Private: training code must go through
    /// [`Sample::train_label`], which hides it unless the split is labeled.
    label: Option<ClassLabel>,
    /// `p² × d_in` patch feature matrix, patches in row-major grid order.
    pub patches: Mat,
    pub anomaly_map: Option<PixelGrid>,
    pub foreground_mask: Option<PixelGrid>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        split: Split,
        label: Option<ClassLabel>,
        patches: Mat,
        anomaly_map: Option<PixelGrid>,
        foreground_mask: Option<PixelGrid>,
    ) -> Self {
        Sample {
            id: id.into(),
            split,
            label,
            patches,
            anomaly_map,
            foreground_mask,
        }
    }

    /// The label a training path may read: `None` unless the sample is in
    /// the labeled split.
    pub fn train_label(&self) -> Option<ClassLabel> {
        match self.split {
            Split::Labeled => self.label,
            _ => None,
        }
    }

    /// Ground truth for evaluation, regardless of split.
    pub fn ground_truth(&self) -> Option<ClassLabel> {
        self.label
    }
}

/// An immutable collection of samples with a shared layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Number of labeled (base) anomaly classes.
    pub k_base: usize,
    /// True novel-class count, known only for synthetic data.
    pub k_new_true: Option<usize>,
    /// Raw patch feature dimension.
    pub d_in: usize,
    /// Patch grid side; every sample has `p²` patches.
    pub p: usize,
    /// Anomaly-map / mask pixel dimensions.
    pub h: usize,
    pub w: usize,
}

impl Dataset {
    /// Checks every dataset invariant; loaders and generators both route
    /// through this.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::ValidationError(format!("duplicate id {}", s.id)));
            }
            if s.patches.rows != self.p * self.p || s.patches.cols != self.d_in {
                return Err(Error::ValidationError(format!(
                    "sample {}: patch grid {}x{} does not match layout p={}, d_in={}",
                    s.id, s.patches.rows, s.patches.cols, self.p, self.d_in
                )));
            }
            if !s.patches.is_finite() {
                return Err(Error::ValidationError(format!(
                    "sample {}: non-finite patch feature",
                    s.id
                )));
            }
            match (s.split, s.label) {
                (Split::Labeled, None) => {
                    return Err(Error::ValidationError(format!(
                        "sample {}: labeled split without a label",
                        s.id
                    )));
                }
                (Split::Labeled, Some(ClassLabel::Novel { .. })) => {
                    return Err(Error::ValidationError(format!(
                        "sample {}: labeled split may only carry base or normal labels",
                        s.id
                    )));
                }
                _ => {}
            }
            if let Some(ClassLabel::Base { index }) = s.label {
                if index >= self.k_base {
                    return Err(Error::ValidationError(format!(
                        "sample {}: base label {index} outside [0, {})",
                        s.id, self.k_base
                    )));
                }
            }
            if let (Some(ClassLabel::Novel { index }), Some(k_new)) = (s.label, self.k_new_true) {
                if index >= k_new {
                    return Err(Error::ValidationError(format!(
                        "sample {}: novel label {index} outside [0, {k_new})",
                        s.id
                    )));
                }
            }
            if let Some(map) = &s.anomaly_map {
                if map.h != self.h || map.w != self.w {
                    return Err(Error::ValidationError(format!(
                        "sample {}: anomaly map {}x{} does not match layout {}x{}",
                        s.id, map.h, map.w, self.h, self.w
                    )));
                }
                if map.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::ValidationError(format!(
                        "sample {}: anomaly map entry outside [0, 1]",
                        s.id
                    )));
                }
            }
            if let Some(mask) = &s.foreground_mask {
                if mask.h != self.h || mask.w != self.w {
                    return Err(Error::ValidationError(format!(
                        "sample {}: foreground mask {}x{} does not match layout {}x{}",
                        s.id, mask.h, mask.w, self.h, self.w
                    )));
                }
                if mask.data.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::ValidationError(format!(
                        "sample {}: foreground mask must be binary",
                        s.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// SHA-256 of the canonical JSONL serialization.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = format::to_jsonl(self);
        let hash = Sha256::digest(text.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        let patches = Mat::from_rows(vec![vec![1.0, 0.0]]);
        Dataset {
            samples: vec![
                Sample::new(
                    "a",
                    Split::Labeled,
                    Some(ClassLabel::Base { index: 0 }),
                    patches.clone(),
                    None,
                    None,
                ),
                Sample::new(
                    "b",
                    Split::Unlabeled,
                    Some(ClassLabel::Novel { index: 0 }),
                    patches,
                    None,
                    None,
                ),
            ],
            k_base: 1,
            k_new_true: Some(1),
            d_in: 2,
            p: 1,
            h: 1,
            w: 1,
        }
    }

    #[test]
    fn validate_accepts_consistent_dataset() {
        tiny_dataset().validate().unwrap();
    }

    #[test]
    fn validate_rejects_out_of_range_base_label() {
        let mut ds = tiny_dataset();
        ds.k_base = 0;
        assert!(matches!(
            ds.validate(),
            Err(Error::ValidationError(_))
        ));
    }

    #[test]
    fn validate_rejects_duplicate_ids() {
        let mut ds = tiny_dataset();
        ds.samples[1].id = "a".into();
        assert!(ds.validate().is_err());
    }

    #[test]
    fn train_label_hides_unlabeled_ground_truth() {
        let ds = tiny_dataset();
        assert_eq!(
            ds.samples[0].train_label(),
            Some(ClassLabel::Base { index: 0 })
        );
        assert_eq!(ds.samples[1].train_label(), None);
        assert_eq!(
            ds.samples[1].ground_truth(),
            Some(ClassLabel::Novel { index: 0 })
        );
    }

    #[test]
    fn class_index_layout() {
        assert_eq!(ClassLabel::Base { index: 2 }.class_index(3, 2), 2);
        assert_eq!(ClassLabel::Novel { index: 1 }.class_index(3, 2), 4);
        assert_eq!(ClassLabel::Normal.class_index(3, 2), 5);
    }
}
