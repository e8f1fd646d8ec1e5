//! Numerically stable softmax, cross-entropy, and KL divergence.
//!
//! Probabilities are clamped to [`EPS_LOG`] inside logarithms so that
//! confident mispredictions stay finite.

use ndarray::{Array1, Array2, ArrayView1};

use super::{LabelDistribution, Scalar};
use crate::error::{Error, Result};

/// Log-domain clamp applied inside CE and KL.
pub const EPS_LOG: f64 = 1e-12;

/// Index of the largest entry; ties break to the lowest index.
pub fn argmax<F: PartialOrd + Copy>(values: &[F]) -> usize {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Stable softmax of a logit slice (max subtraction).
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = out.iter().copied().fold(F::zero(), |a, b| a + b);
    for v in &mut out {
        *v = *v / sum;
    }
    out
}

/// Softmax as a validated [`LabelDistribution`]; rejects non-finite logits.
pub fn softmax_distribution<F: Scalar>(logits: &Array1<F>) -> Result<LabelDistribution<F>> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("non-finite logits in softmax"));
    }
    let probs = softmax(logits.as_slice().unwrap());
    LabelDistribution::try_new(Array1::from_vec(probs))
}

/// Row-wise softmax for a logit batch [N, C].
pub fn softmax_batch<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

#[inline]
fn ln_clamped<F: Scalar>(p: F) -> F {
    let eps = super::scalar::<F>(EPS_LOG);
    p.max(eps).ln()
}

/// −Σ target·log pred over probability slices. Soft targets allowed.
pub fn cross_entropy<F: Scalar>(pred: &[F], target: &[F]) -> F {
    debug_assert_eq!(pred.len(), target.len());
    let mut acc = F::zero();
    for (&p, &t) in pred.iter().zip(target) {
        if t != F::zero() {
            acc -= t * ln_clamped(p);
        }
    }
    acc
}

/// Σ p·log(p/q) over probability slices; 0 iff p = q up to the clamp.
pub fn kl_divergence<F: Scalar>(p: &[F], q: &[F]) -> F {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = F::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi != F::zero() {
            acc += pi * (ln_clamped(pi) - ln_clamped(qi));
        }
    }
    acc
}

/// CE between validated distributions (spec-facing wrapper).
pub fn cross_entropy_dist<F: Scalar>(
    pred: &LabelDistribution<F>,
    target: &LabelDistribution<F>,
) -> F {
    cross_entropy(
        pred.probs().as_slice().unwrap(),
        target.probs().as_slice().unwrap(),
    )
}

/// KL between validated distributions (spec-facing wrapper).
pub fn kl_divergence_dist<F: Scalar>(
    p: &LabelDistribution<F>,
    q: &LabelDistribution<F>,
) -> F {
    kl_divergence(p.probs().as_slice().unwrap(), q.probs().as_slice().unwrap())
}

/// One-hot encode class ids into a batch matrix [N, C].
pub fn one_hot_batch<F: Scalar>(classes: &[usize], num_classes: usize) -> Result<Array2<F>> {
    let mut out = Array2::zeros((classes.len(), num_classes));
    for (i, &c) in classes.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::ClassOutOfRange {
                id: c,
                num_classes,
            });
        }
        out[[i, c]] = F::one();
    }
    Ok(out)
}

/// Mean CE over batch rows of predicted probabilities vs target rows.
pub fn mean_cross_entropy<F: Scalar>(pred: &Array2<F>, target: &Array2<F>) -> F {
    let n = pred.nrows();
    let mut acc = F::zero();
    for i in 0..n {
        acc += cross_entropy(
            pred.row(i).as_slice().unwrap(),
            target.row(i).as_slice().unwrap(),
        );
    }
    acc / super::scalar::<F>(n as f64)
}

/// Mean KL(p_i ‖ q_i) over batch rows.
pub fn mean_kl_divergence<F: Scalar>(p: &Array2<F>, q: &Array2<F>) -> F {
    let n = p.nrows();
    let mut acc = F::zero();
    for i in 0..n {
        acc += kl_divergence(
            p.row(i).as_slice().unwrap(),
            q.row(i).as_slice().unwrap(),
        );
    }
    acc / super::scalar::<F>(n as f64)
}

/// Accuracy of row-wise argmax predictions against class ids.
pub fn argmax_accuracy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> f64 {
    debug_assert_eq!(logits.nrows(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let correct = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.as_slice().unwrap()) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// View helper: CE of a row view against a row view.
pub fn cross_entropy_rows<F: Scalar>(pred: ArrayView1<F>, target: ArrayView1<F>) -> F {
    cross_entropy(pred.as_slice().unwrap(), target.as_slice().unwrap())
}
