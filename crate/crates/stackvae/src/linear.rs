//! Dense affine layer with owned gradient buffers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// `y = weight·x + bias`, applied column-wise to batches.
///
/// `weight` is out×in; gradients accumulate into `grad_weight` / `grad_bias`
/// and are zeroed between optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub grad_weight: Matrix,
    pub grad_bias: Vec<f64>,
}

impl LinearLayer {
    /// Xavier-uniform weights on `[-sqrt(6/(fan_in+fan_out)), +...]`, zero bias.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        LinearLayer {
            weight: Matrix::uniform(out_dim, in_dim, limit, rng),
            bias: vec![0.0; out_dim],
            grad_weight: Matrix::zeros(out_dim, in_dim),
            grad_bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            grad_weight: Matrix::zeros(out_dim, in_dim),
            grad_bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `weight·x + bias`, one output column per input column.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.in_dim() {
            return Err(Error::shape(
                "linear_forward",
                format!("{} input rows", self.in_dim()),
                format!("{} rows", x.rows()),
            ));
        }
        let mut out = self.weight.matmul(x);
        for i in 0..out.rows() {
            let b = self.bias[i];
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) + b);
            }
        }
        Ok(out)
    }

    pub fn zero_grads(&mut self) {
        self.grad_weight.as_mut_slice().fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }
}

/// Spec-level alias for [`LinearLayer::forward`].
pub fn linear_forward(layer: &LinearLayer, x: &Matrix) -> Result<Matrix> {
    layer.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_passthrough() {
        let mut layer = LinearLayer::zeros(2, 2);
        layer.weight = Matrix::identity(2);
        let x = Matrix::column(&[3.0, -1.0]);
        assert_eq!(layer.forward(&x).unwrap().as_slice(), &[3.0, -1.0]);
    }

    #[test]
    fn scalar_affine() {
        let mut layer = LinearLayer::zeros(1, 1);
        layer.weight.set(0, 0, 2.0);
        layer.bias[0] = 1.0;
        let x = Matrix::column(&[3.0]);
        assert_eq!(layer.forward(&x).unwrap().get(0, 0), 7.0);
    }

    #[test]
    fn matches_scalar_oracle_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = LinearLayer::new(3, 4, &mut rng);
        let x = Matrix::uniform(3, 1, 1.0, &mut rng);
        let got = layer.forward(&x).unwrap();
        for i in 0..4 {
            let mut want = layer.bias[i];
            for k in 0..3 {
                want += layer.weight.get(i, k) * x.get(k, 0);
            }
            assert_eq!(got.get(i, 0), want);
        }
    }

    #[test]
    fn shape_error_on_dimension_mismatch() {
        let layer = LinearLayer::zeros(3, 2);
        let x = Matrix::zeros(4, 1);
        assert!(layer.forward(&x).is_err());
    }

    #[test]
    fn batch_columns_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = LinearLayer::new(2, 2, &mut rng);
        let a = Matrix::uniform(2, 1, 1.0, &mut rng);
        let b = Matrix::uniform(2, 1, 1.0, &mut rng);
        let mut both = Matrix::zeros(2, 2);
        for i in 0..2 {
            both.set(i, 0, a.get(i, 0));
            both.set(i, 1, b.get(i, 0));
        }
        let out = layer.forward(&both).unwrap();
        let oa = layer.forward(&a).unwrap();
        let ob = layer.forward(&b).unwrap();
        for i in 0..2 {
            assert_eq!(out.get(i, 0), oa.get(i, 0));
            assert_eq!(out.get(i, 1), ob.get(i, 0));
        }
    }
}
