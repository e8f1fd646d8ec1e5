//! Differentiable-classifier contract and shared numerical primitives.
//!
//! Everything downstream (attacks, trainers, evaluation) talks to models
//! through the [`Classifier`] trait, so tests can substitute closed-form
//! linear models where analytic gradients are known.

pub mod checkpoint;
pub mod convnet;
pub mod linear;
pub mod math;
pub mod optimizer;

use ndarray::{Array1, Array2, Array4, NdFloat};
use rand::distributions::uniform::SampleUniform;

use crate::error::{Error, Result};

/// Float element type for all numeric kernels. `f32` is the training
/// default; `f64` backs the finite-difference gradient checks.
pub trait Scalar: NdFloat + SampleUniform + Send + Sync + 'static {
    const DTYPE: &'static str;
    const BYTE_WIDTH: usize;

    /// Append the little-endian encoding (bit-exact round trip).
    fn write_le(&self, out: &mut Vec<u8>);
    /// Decode from `Self::BYTE_WIDTH` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Convert an `f64` constant into the working scalar type.
#[inline]
pub fn scalar<F: Scalar>(v: f64) -> F {
    F::from(v).expect("constant representable in scalar type")
}

/// Probability vector over the class set.
///
/// Invariant: non-negative entries summing to 1 within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution<F: Scalar = f32>(Array1<F>);

impl<F: Scalar> LabelDistribution<F> {
    /// Tolerance on the simplex sum constraint.
    pub const SUM_TOL: f64 = 1e-6;

    pub fn try_new(probs: Array1<F>) -> Result<Self> {
        let mut sum = F::zero();
        for &p in probs.iter() {
            if !p.is_finite() || p < F::zero() {
                return Err(Error::invalid(format!(
                    "distribution entry {p} is negative or non-finite"
                )));
            }
            sum += p;
        }
        if (sum.to_f64().unwrap() - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::invalid(format!("distribution sums to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    /// One-hot distribution for `class`.
    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::ClassOutOfRange {
                id: class,
                num_classes,
            });
        }
        let mut v = Array1::zeros(num_classes);
        v[class] = F::one();
        Ok(Self(v))
    }

    /// Uniform distribution over `num_classes`.
    pub fn uniform(num_classes: usize) -> Self {
        Self(Array1::from_elem(
            num_classes,
            F::one() / scalar::<F>(num_classes as f64),
        ))
    }

    pub fn probs(&self) -> &Array1<F> {
        &self.0
    }

    pub fn into_inner(self) -> Array1<F> {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest entry; ties break to the lowest class index.
    pub fn argmax(&self) -> usize {
        math::argmax(self.0.as_slice().unwrap())
    }

    /// True when exactly one entry is 1 and the rest are 0.
    pub fn is_one_hot(&self) -> bool {
        let mut ones = 0usize;
        for &p in self.0.iter() {
            if p == F::one() {
                ones += 1;
            } else if p != F::zero() {
                return false;
            }
        }
        ones == 1
    }
}

/// Train/eval mode flag. Attack generation and evaluation always run in
/// eval mode; the reference backbone has no stochastic layers, so the flag
/// only records intent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Scalar loss specification for input-gradient queries.
///
/// Rows of the target/reference matrix pair up with rows of the input
/// batch. Both losses operate on softmax outputs; the reference side of
/// the KL objective is frozen (no gradient flows through it).
#[derive(Debug, Clone)]
pub enum LossSpec<F: Scalar> {
    /// −Σ target·log softmax(z); soft targets allowed.
    CeToTarget { targets: Array2<F> },
    /// KL(reference ‖ softmax(z)) with the reference fixed.
    KlToReference { reference: Array2<F> },
}

impl<F: Scalar> LossSpec<F> {
    /// Per-example scalar objective values for a logit batch.
    pub fn values(&self, logits: &Array2<F>) -> Array1<F> {
        let probs = math::softmax_batch(logits);
        let n = logits.nrows();
        let mut out = Array1::zeros(n);
        for i in 0..n {
            let p = probs.row(i);
            out[i] = match self {
                LossSpec::CeToTarget { targets } => {
                    math::cross_entropy(p.as_slice().unwrap(), targets.row(i).as_slice().unwrap())
                }
                LossSpec::KlToReference { reference } => math::kl_divergence(
                    reference.row(i).as_slice().unwrap(),
                    p.as_slice().unwrap(),
                ),
            };
        }
        out
    }

    /// d(loss)/d(logits), per example (no batch reduction). For both
    /// objectives this is `softmax(z) − t` with `t` the target or the
    /// frozen reference row.
    pub fn dlogits(&self, logits: &Array2<F>) -> Array2<F> {
        let probs = math::softmax_batch(logits);
        match self {
            LossSpec::CeToTarget { targets } => probs - targets,
            LossSpec::KlToReference { reference } => probs - reference,
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            LossSpec::CeToTarget { targets } => targets.nrows(),
            LossSpec::KlToReference { reference } => reference.nrows(),
        }
    }
}

/// Differentiable map from image batches to logits.
///
/// Implementations must be pure in eval mode: `forward_batch` is a
/// function of (parameters, input) only, and gradient queries never
/// mutate parameters.
pub trait Classifier<F: Scalar>: Send + Sync {
    /// Expected input shape as [channels, height, width].
    fn input_shape(&self) -> [usize; 3];

    fn num_classes(&self) -> usize;

    /// Logits for a batch [N, C, H, W] → [N, num_classes].
    fn forward_batch(&self, x: &Array4<F>) -> Array2<F>;

    /// Gradient of the summed per-example loss w.r.t. the input batch.
    /// Examples decouple, so each output slice is that example's own
    /// loss gradient.
    fn input_gradient_batch(&self, x: &Array4<F>, loss: &LossSpec<F>) -> Result<Array4<F>>;

    /// Logits for a single example [C, H, W].
    fn forward_one(&self, x: &ndarray::Array3<F>) -> Array1<F> {
        let (c, h, w) = x.dim();
        let batch = x
            .to_shape((1, c, h, w))
            .expect("reshape single example")
            .to_owned();
        self.forward_batch(&batch).row(0).to_owned()
    }
}

/// Softmax of the forward pass as a validated distribution.
pub fn predict_distribution<F: Scalar, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &ndarray::Array3<F>,
) -> Result<LabelDistribution<F>> {
    let logits = model.forward_one(x);
    math::softmax_distribution(&logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn one_hot_roundtrip() {
        let d = LabelDistribution::<f64>::one_hot(2, 4).unwrap();
        assert!(d.is_one_hot());
        assert_eq!(d.argmax(), 2);
    }

    #[test]
    fn rejects_negative_and_unnormalized() {
        assert!(LabelDistribution::<f64>::try_new(array![0.5, -0.1, 0.6]).is_err());
        assert!(LabelDistribution::<f64>::try_new(array![0.5, 0.4]).is_err());
        assert!(LabelDistribution::<f64>::try_new(array![0.5, 0.5]).is_ok());
    }

    #[test]
    fn uniform_is_valid() {
        let d = LabelDistribution::<f32>::uniform(10);
        LabelDistribution::<f32>::try_new(d.probs().clone()).unwrap();
    }
}
