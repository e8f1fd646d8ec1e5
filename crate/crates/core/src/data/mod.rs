//! Dataset abstraction, deterministic class-balanced splitting, and the
//! weak/strong augmentation pipelines.
//!
//! A [`Dataset`] is an immutable, indexable collection of images in
//! [0, 1] with class ids. Unlabeled examples keep their true class id
//! internally — trainers never read it, but the evaluation harness uses
//! it to measure pseudo-label error rates.

pub mod arrayfile;
pub mod augment;
pub mod split;
pub mod synthetic;

use ndarray::{Array3, Array4, ArrayView3};

use crate::error::{Error, Result};
use crate::model::LabelDistribution;

pub use augment::{augment, AugKind, AugmentationPolicy};
pub use split::{make_ssl_split, SSLSplit};
pub use synthetic::SyntheticSpec;

/// Immutable image-classification dataset. Images are [N, C, H, W] in
/// [0, 1]; `labels[i]` is the class id of example `i`. Read-only after
/// construction and safe to share across threads.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Array4<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

/// A labeled view: image, one-hot ground truth, and stable index.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub x: Array3<f32>,
    pub y_gt: LabelDistribution,
    pub index: usize,
}

/// An unlabeled view: image and stable index only.
#[derive(Debug, Clone)]
pub struct UnlabeledExample {
    pub x: Array3<f32>,
    pub index: usize,
}

impl Dataset {
    pub fn new(images: Array4<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.dim().0 != labels.len() {
            return Err(Error::shape(
                format!("{} labels", images.dim().0),
                format!("{}", labels.len()),
            ));
        }
        if num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::ClassOutOfRange {
                    id: y,
                    num_classes,
                });
            }
            let _ = i;
        }
        if images.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("image component outside [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// [channels, height, width] of every image.
    pub fn image_shape(&self) -> [usize; 3] {
        let (_, c, h, w) = self.images.dim();
        [c, h, w]
    }

    pub fn image(&self, index: usize) -> ArrayView3<'_, f32> {
        self.images.index_axis(ndarray::Axis(0), index)
    }

    /// Class id of example `index`. Trainers must not call this for
    /// unlabeled indices; evaluation may.
    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn labeled_example(&self, index: usize) -> Result<LabeledExample> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange(index));
        }
        Ok(LabeledExample {
            x: self.image(index).to_owned(),
            y_gt: LabelDistribution::one_hot(self.labels[index], self.num_classes)?,
            index,
        })
    }

    pub fn unlabeled_example(&self, index: usize) -> Result<UnlabeledExample> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange(index));
        }
        Ok(UnlabeledExample {
            x: self.image(index).to_owned(),
            index,
        })
    }

    /// Gather a batch of raw images into [B, C, H, W].
    pub fn gather(&self, indices: &[usize]) -> Result<Array4<f32>> {
        let [c, h, w] = self.image_shape();
        let mut out = Array4::zeros((indices.len(), c, h, w));
        for (bi, &idx) in indices.iter().enumerate() {
            if idx >= self.len() {
                return Err(Error::IndexOutOfRange(idx));
            }
            out.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&self.image(idx));
        }
        Ok(out)
    }

    /// Gather a batch, augmenting each example with its own
    /// (epoch, index)-keyed stream.
    pub fn gather_augmented(
        &self,
        indices: &[usize],
        policy: &AugmentationPolicy,
        epoch: usize,
    ) -> Result<Array4<f32>> {
        let [c, h, w] = self.image_shape();
        let mut out = Array4::zeros((indices.len(), c, h, w));
        for (bi, &idx) in indices.iter().enumerate() {
            if idx >= self.len() {
                return Err(Error::IndexOutOfRange(idx));
            }
            let aug = augment(&self.image(idx).to_owned(), policy, epoch, idx)?;
            out.index_axis_mut(ndarray::Axis(0), bi).assign(&aug);
        }
        Ok(out)
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}
