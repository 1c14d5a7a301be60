//! Classical comparison point: i.i.d. Gaussian linear measurements recovered
//! by Tikhonov-regularized least squares.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{BlockVector, MeasurementRate, BLOCK_LEN};
use crate::tensor::Tensor;

pub const BASELINE_LAMBDA: f64 = 1e-3;

/// Linear sampler `y = phi x` with a Tikhonov decoder.
///
/// The decoder returns `argmin_x |phi x - y|^2 + lambda |x|^2`. It solves
/// the m x m system `(phi phi^T + lambda I) a = y` and returns `phi^T a`,
/// which equals `(phi^T phi + lambda I)^-1 phi^T y` but factors a matrix of
/// the measurement count rather than the block size.
pub struct GaussianBaseline {
    pub phi: Tensor,
    pub seed: u64,
    pub lambda: f64,
    factor: Cholesky<f64, Dyn>,
}

impl GaussianBaseline {
    /// `phi` entries drawn from N(0, 1/m).
    pub fn new(rate: MeasurementRate, seed: u64) -> Self {
        let m = rate.measurements();
        let normal = Normal::new(0.0, (1.0 / m as f64).sqrt()).expect("positive std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..m * BLOCK_LEN).map(|_| normal.sample(&mut rng)).collect();
        let phi = Tensor::new(vec![m, BLOCK_LEN], data).expect("phi shape");
        Self::from_matrix(phi, BASELINE_LAMBDA, seed).expect("gaussian gram matrix is positive definite")
    }

    pub fn from_matrix(phi: Tensor, lambda: f64, seed: u64) -> Result<Self> {
        if phi.rank() != 2 {
            return Err(Error::shape("GaussianBaseline", &[0, 0], phi.shape()));
        }
        if lambda.is_nan() || lambda <= 0.0 {
            return Err(Error::Config(format!("regularization must be positive, got {lambda}")));
        }
        let (m, n) = (phi.shape()[0], phi.shape()[1]);
        let a = DMatrix::from_row_slice(m, n, phi.data());
        let gram = &a * a.transpose() + DMatrix::identity(m, m) * lambda;
        let factor = Cholesky::new(gram)
            .ok_or_else(|| Error::Config("regularized Gram matrix is not positive definite".into()))?;
        Ok(Self {
            phi,
            seed,
            lambda,
            factor,
        })
    }

    pub fn measurements(&self) -> usize {
        self.phi.shape()[0]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.phi.shape()[0], self.phi.shape()[1], self.phi.data())
    }

    /// `y = phi x` (linear, no activation).
    pub fn measure(&self, block: &BlockVector) -> Tensor {
        let x = DMatrix::from_column_slice(BLOCK_LEN, 1, block.values());
        Tensor::vector((self.matrix() * x).as_slice().to_vec())
    }

    pub fn reconstruct(&self, y: &Tensor) -> Result<BlockVector> {
        if y.shape() != [self.measurements()] {
            return Err(Error::shape("baseline_reconstruct", &[self.measurements()], y.shape()));
        }
        let out = self.reconstruct_batch(&y.clone().reshape(&[1, self.measurements()])?)?;
        BlockVector::from_tensor(out)
    }

    /// `[batch, n]` blocks to `[batch, m]` measurements.
    pub fn measure_batch(&self, blocks: &Tensor) -> Result<Tensor> {
        let n = self.phi.shape()[1];
        if blocks.rank() != 2 || blocks.shape()[1] != n {
            return Err(Error::shape("measure_batch", &[0, n], blocks.shape()));
        }
        let b = blocks.shape()[0];
        // column-major (n x b) view of the row-major (b x n) stack
        let x = DMatrix::from_column_slice(n, b, blocks.data());
        let y = self.matrix() * x;
        Tensor::new(vec![b, self.measurements()], y.as_slice().to_vec())
    }

    /// `[batch, m]` measurements to `[batch, n]` estimates.
    pub fn reconstruct_batch(&self, y: &Tensor) -> Result<Tensor> {
        let m = self.measurements();
        if y.rank() != 2 || y.shape()[1] != m {
            return Err(Error::shape("reconstruct_batch", &[0, m], y.shape()));
        }
        let b = y.shape()[0];
        let rhs = DMatrix::from_column_slice(m, b, y.data());
        let dual = self.factor.solve(&rhs);
        let x = self.matrix().transpose() * dual;
        Tensor::new(vec![b, self.phi.shape()[1]], x.as_slice().to_vec())
    }

    /// `|phi x - y|^2 + lambda |x|^2`.
    pub fn objective(&self, x: &[f64], y: &[f64]) -> f64 {
        let r = self.matrix() * DMatrix::from_column_slice(x.len(), 1, x) - DMatrix::from_column_slice(y.len(), 1, y);
        r.norm_squared() + self.lambda * x.iter().map(|v| v * v).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_block(seed: u64) -> BlockVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BlockVector::new((0..BLOCK_LEN).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn phi_shape_and_scale() {
        let b = GaussianBaseline::new(MeasurementRate::R25, 0);
        assert_eq!(b.phi.shape(), &[272, 1089]);
        let var = b.phi.data().iter().map(|v| v * v).sum::<f64>() / b.phi.len() as f64;
        assert!((var * 272.0 - 1.0).abs() < 0.02, "variance {var}");
        assert_eq!(
            GaussianBaseline::new(MeasurementRate::R01, 3).phi,
            GaussianBaseline::new(MeasurementRate::R01, 3).phi
        );
    }

    #[test]
    fn identity_operator_recovers_measurements() {
        let mut eye = Tensor::zeros(&[BLOCK_LEN, BLOCK_LEN]);
        for i in 0..BLOCK_LEN {
            eye.data_mut()[i * BLOCK_LEN + i] = 1.0;
        }
        let b = GaussianBaseline::from_matrix(eye, 1e-6, 0).unwrap();
        let x = random_block(1);
        let y = b.measure(&x);
        let xr = b.reconstruct(&y).unwrap();
        for (a, c) in xr.values().iter().zip(y.data()) {
            assert!((a - c).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_measurements_give_zero() {
        let b = GaussianBaseline::new(MeasurementRate::R04, 0);
        let x = b.reconstruct(&Tensor::zeros(&[43])).unwrap();
        assert!(x.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tikhonov_objective_optimal_against_true_block() {
        for seed in 0..5 {
            let b = GaussianBaseline::new(MeasurementRate::R25, seed);
            let x = random_block(seed + 10);
            let y = b.measure(&x);
            let xr = b.reconstruct(&y).unwrap();
            let (j_hat, j_true) = (b.objective(xr.values(), y.data()), b.objective(x.values(), y.data()));
            assert!(j_hat <= j_true + 1e-9, "{j_hat} > {j_true}");
        }
    }

    #[test]
    fn near_zero_regularization_fits_measurements() {
        let probe = GaussianBaseline::new(MeasurementRate::R25, 7);
        let b = GaussianBaseline::from_matrix(probe.phi.clone(), 1e-12, 7).unwrap();
        let x = random_block(3);
        let y = b.measure(&x);
        let xr = b.reconstruct(&y).unwrap();
        let fitted = b.measure(&xr);
        let residual: f64 = fitted
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, c)| (a - c).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(residual <= 1e-9, "residual {residual}");
    }

    #[test]
    fn batch_matches_single() {
        let b = GaussianBaseline::new(MeasurementRate::R10, 1);
        let blocks: Vec<_> = (0..3).map(random_block).collect();
        let stacked = Tensor::stack(blocks.iter().map(BlockVector::as_tensor)).unwrap();
        let ys = b.measure_batch(&stacked).unwrap();
        let xs = b.reconstruct_batch(&ys).unwrap();
        for (i, blk) in blocks.iter().enumerate() {
            let y = b.measure(blk);
            for (p, q) in ys.outer(i).iter().zip(y.data()) {
                assert!((p - q).abs() < 1e-12);
            }
            let x = b.reconstruct(&y).unwrap();
            for (p, q) in xs.outer(i).iter().zip(x.values()) {
                assert!((p - q).abs() < 1e-10);
            }
        }
    }
}
