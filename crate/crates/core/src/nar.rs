//! Noise-aware rectification: fuses generator label distributions with
//! one-hot anchors into training targets.
//!
//! Labeled data fuses with ground truth; unlabeled data fuses with a
//! one-hot label sampled from the distribution itself (argmax exists
//! only as an ablation arm). A single fusion factor λ is shared by both
//! branches. Sampling streams are keyed per (epoch, example index), so
//! unlabeled targets are resampled every epoch by default — fixing them
//! per refresh window is a config flag.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{scalar, LabelDistribution, Scalar};
use crate::rng::{derive_rng, tag};

/// How the one-hot anchor for unlabeled data is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlabeledMode {
    /// Sample the anchor class from the distribution (the default).
    Sample,
    /// Take the argmax (sensitivity-comparison arm only).
    Argmax,
}

/// Rectification parameters. The same `lambda` feeds the labeled and the
/// unlabeled branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NARConfig {
    /// Fusion factor λ ∈ [0, 1]: weight of the predicted distribution.
    pub lambda: f64,
    pub unlabeled_mode: UnlabeledMode,
    /// When true (default), unlabeled anchors are resampled each epoch;
    /// when false, the epoch key is pinned to the snapshot epoch.
    pub resample_each_epoch: bool,
    /// Seed for the per-(epoch, index) sampling streams.
    pub seed: u64,
}

impl NARConfig {
    pub fn new(lambda: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            lambda,
            unlabeled_mode: UnlabeledMode::Sample,
            resample_each_epoch: true,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn sampling_rng(&self, epoch: usize, index: usize) -> ChaCha8Rng {
        derive_rng(self.seed, &[tag::NAR_SAMPLE, epoch as u64, index as u64])
    }
}

/// Origin of a rectified target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSource {
    Labeled,
    Unlabeled,
}

/// A training target produced by rectification.
#[derive(Debug, Clone)]
pub struct RectifiedTarget<F: Scalar = f32> {
    pub y_hat: LabelDistribution<F>,
    pub source: TargetSource,
    /// Anchor class drawn for unlabeled sample mode.
    pub sampled_class: Option<usize>,
}

/// λ·p + (1−λ)·anchor, component-wise. Convex combination of simplex
/// points, so the result is exactly on the simplex.
fn fuse<F: Scalar>(p: &LabelDistribution<F>, anchor: &LabelDistribution<F>, lambda: f64) -> LabelDistribution<F> {
    let l = scalar::<F>(lambda);
    let probs = p.probs() * l + anchor.probs() * (F::one() - l);
    LabelDistribution::try_new(probs).expect("convex combination stays on the simplex")
}

/// Labeled branch: ŷ = λ·p + (1−λ)·y_gt.
pub fn rectify_labeled<F: Scalar>(
    p: &LabelDistribution<F>,
    y_gt: &LabelDistribution<F>,
    lambda: f64,
) -> Result<RectifiedTarget<F>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda must be in [0, 1], got {lambda}")));
    }
    if !y_gt.is_one_hot() {
        return Err(Error::invalid("ground-truth target must be one-hot"));
    }
    if p.num_classes() != y_gt.num_classes() {
        return Err(Error::shape(
            format!("{} classes", p.num_classes()),
            format!("{}", y_gt.num_classes()),
        ));
    }
    Ok(RectifiedTarget {
        y_hat: fuse(p, y_gt, lambda),
        source: TargetSource::Labeled,
        sampled_class: None,
    })
}

/// Draw one class with probability proportional to `p` (inverse-CDF over
/// the given order). Rejects degenerate inputs whose mass vanishes.
pub fn sample_one_hot<F: Scalar, R: Rng>(
    p: &LabelDistribution<F>,
    rng: &mut R,
) -> Result<usize> {
    let total: F = p.probs().iter().fold(F::zero(), |a, &b| a + b);
    if total <= F::zero() {
        return Err(Error::invalid("cannot sample from zero-mass distribution"));
    }
    let u: F = rng.gen_range(F::zero()..F::one()) * total;
    let mut acc = F::zero();
    let mut last_nonzero = 0usize;
    for (i, &pi) in p.probs().iter().enumerate() {
        if pi > F::zero() {
            last_nonzero = i;
        }
        acc += pi;
        if u < acc {
            return Ok(i);
        }
    }
    // Rounding can leave acc marginally below total; assign the tail to
    // the last class with mass.
    Ok(last_nonzero)
}

/// Unlabeled branch: ŷ = λ·p + (1−λ)·onehot(anchor), where the anchor is
/// sampled from `p` or, in the ablation arm, its argmax.
pub fn rectify_unlabeled<F: Scalar, R: Rng>(
    p: &LabelDistribution<F>,
    config: &NARConfig,
    rng: &mut R,
) -> Result<RectifiedTarget<F>> {
    config.validate()?;
    let class = match config.unlabeled_mode {
        UnlabeledMode::Sample => sample_one_hot(p, rng)?,
        UnlabeledMode::Argmax => p.argmax(),
    };
    let anchor = LabelDistribution::one_hot(class, p.num_classes())?;
    Ok(RectifiedTarget {
        y_hat: fuse(p, &anchor, config.lambda),
        source: TargetSource::Unlabeled,
        sampled_class: match config.unlabeled_mode {
            UnlabeledMode::Sample => Some(class),
            UnlabeledMode::Argmax => None,
        },
    })
}
