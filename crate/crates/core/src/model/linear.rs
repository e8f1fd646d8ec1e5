//! Minimal linear classifier.
//!
//! Logits are an affine map of the flattened input. Gradients have closed
//! forms, which makes this the reference implementation behind the attack
//! and gradient oracles: dCE/dx = Wᵀ(softmax(Wx+b) − t).

use ndarray::{Array1, Array2, Array4};

use super::{Classifier, LossSpec, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LinearModel<F: Scalar> {
    input_shape: [usize; 3],
    /// [num_classes, flattened_dim]
    pub weights: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> LinearModel<F> {
    pub fn new(input_shape: [usize; 3], weights: Array2<F>, bias: Array1<F>) -> Result<Self> {
        let d = input_shape.iter().product::<usize>();
        if weights.ncols() != d || weights.nrows() != bias.len() {
            return Err(Error::shape(
                format!("[C, {d}] weights with matching bias"),
                format!("[{}, {}] / {}", weights.nrows(), weights.ncols(), bias.len()),
            ));
        }
        Ok(Self {
            input_shape,
            weights,
            bias,
        })
    }

    fn flatten(&self, x: &Array4<F>) -> Array2<F> {
        let n = x.dim().0;
        let d = self.input_shape.iter().product::<usize>();
        let std = x.as_standard_layout();
        Array2::from_shape_vec((n, d), std.as_slice().unwrap().to_vec()).expect("flatten")
    }
}

impl<F: Scalar> Classifier<F> for LinearModel<F> {
    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn forward_batch(&self, x: &Array4<F>) -> Array2<F> {
        let flat = self.flatten(x);
        let mut logits = flat.dot(&self.weights.t());
        for mut row in logits.rows_mut() {
            for (v, &b) in row.iter_mut().zip(self.bias.iter()) {
                *v += b;
            }
        }
        logits
    }

    fn input_gradient_batch(&self, x: &Array4<F>, loss: &LossSpec<F>) -> Result<Array4<F>> {
        if loss.rows() != x.dim().0 {
            return Err(Error::shape(
                format!("{} loss rows", x.dim().0),
                format!("{}", loss.rows()),
            ));
        }
        let logits = self.forward_batch(x);
        let dlogits = loss.dlogits(&logits);
        let flat_grad = dlogits.dot(&self.weights);
        let (n, c, h, w) = x.dim();
        let std = flat_grad.as_standard_layout();
        Ok(
            Array4::from_shape_vec((n, c, h, w), std.as_slice().unwrap().to_vec())
                .expect("gradient reshape"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::math;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array4};

    #[test]
    fn gradient_matches_closed_form() {
        // 2-class model on a 2-pixel "image": logits = [w·x, 0]
        let w = array![[0.8f64, -0.4], [0.0, 0.0]];
        let model = LinearModel::new([1, 1, 2], w.clone(), array![0.0, 0.0]).unwrap();
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![0.3, 0.6]).unwrap();
        let targets = math::one_hot_batch::<f64>(&[0], 2).unwrap();
        let grad = model
            .input_gradient_batch(&x, &LossSpec::CeToTarget { targets })
            .unwrap();
        // dCE/dx = Wᵀ(p − t); with target 0, row 0 carries (p0 − 1)
        let logits = model.forward_batch(&x);
        let p = math::softmax(logits.row(0).as_slice().unwrap());
        let expect0 = (p[0] - 1.0) * 0.8;
        let expect1 = (p[0] - 1.0) * (-0.4);
        assert_abs_diff_eq!(grad[[0, 0, 0, 0]], expect0, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[[0, 0, 0, 1]], expect1, epsilon = 1e-12);
    }
}
