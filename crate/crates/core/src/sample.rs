//! Labeled image samples: an RGB image, its caption, and a set of
//! per-instance binary masks tagged with a free-form label and a person id.
//!
//! This is the interchange type between the synthetic data generator, the
//! on-disk dataset layout, the training loop, and the evaluation harness.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// One annotated region: a binary mask plus its label and owning person.
#[derive(Debug, Clone)]
pub struct Instance {
    /// Binary mask, shape `[H, W]`, values exactly 0.0 or 1.0.
    pub mask: Array2<f64>,
    /// Free-form label, e.g. "tops" or "left shoe". Lowercase by convention.
    pub label: String,
    /// Person index this instance belongs to (0-based within the image).
    pub person: usize,
}

/// An image with caption and instance annotations.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    /// RGB image, shape `[3, H, W]`, values in `[0, 1]`.
    pub image: Array3<f64>,
    /// Natural-language caption mentioning the labels present in the image.
    pub caption: String,
    pub instances: Vec<Instance>,
}

impl LabeledSample {
    /// Checks internal consistency: mask shapes match the image plane,
    /// masks are strictly binary, labels are nonempty, pixel values in range.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image.dim();
        if c != 3 {
            return Err(Error::Shape(format!(
                "sample image must have 3 channels, got {c}"
            )));
        }
        if self.image.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Shape(
                "sample image values must lie in [0, 1]".into(),
            ));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.mask.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "instance {i} mask is {:?}, image plane is [{h}, {w}]",
                    inst.mask.dim()
                )));
            }
            if inst.mask.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Shape(format!(
                    "instance {i} mask must be binary (0.0 / 1.0)"
                )));
            }
            if inst.label.trim().is_empty() {
                return Err(Error::Shape(format!("instance {i} has an empty label")));
            }
        }
        Ok(())
    }

    /// Height and width of the image plane.
    pub fn plane(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }

    /// Number of distinct person ids among the instances.
    pub fn person_count(&self) -> usize {
        let mut ids: Vec<usize> = self.instances.iter().map(|i| i.person).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}
