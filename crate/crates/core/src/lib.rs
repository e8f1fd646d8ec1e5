//! Semi-supervised adversarial training with noisy pseudo labels.
//!
//! The pipeline trains a pseudo-label generator with confidence-thresholded
//! semi-supervised learning, rectifies its label distributions by fusing
//! them with ground truth or sampled one-hot labels, refreshes the labels
//! online from the still-training generator, and adversarially trains a
//! robust classifier against L∞-bounded attacks. An evaluation harness
//! reports clean and robust accuracy, component ablations, and fusion-factor
//! sweeps.

pub mod attacks;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nar;
pub mod ord;
pub mod ssl;
pub mod rng;
pub mod robust;
pub mod run;

pub use error::{Error, Result};
pub use model::{Classifier, LabelDistribution, Mode, Scalar};
