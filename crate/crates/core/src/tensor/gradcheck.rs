//! Central finite-difference verification of the analytic backward passes.
//!
//! A layer under test exposes its perturbable tensors (parameters and
//! inputs) as slots. The scalar probed is `<probe, forward()>` for a fixed
//! random `probe`, whose gradient with respect to every slot is what the
//! layer's backward pass returns when fed `probe` as the upstream gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, mse_grad, mse_loss, relu, relu_backward,
    ConvParams, DenseParams, Tensor,
};
use crate::error::Result;

pub trait GradCheck {
    fn forward(&self) -> Result<Tensor>;

    /// Analytic gradients, one per slot, in slot order.
    fn backward(&self, upstream: &Tensor) -> Result<Vec<Tensor>>;

    fn slots_mut(&mut self) -> Vec<&mut Tensor>;
}

/// Largest relative error between analytic and central-difference gradients
/// over every entry of every slot.
pub fn grad_check(layer: &mut dyn GradCheck, eps: f64, seed: u64) -> Result<f64> {
    let out = layer.forward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe_data = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let probe = Tensor::new(out.shape().to_vec(), probe_data)?;
    let analytic = layer.backward(&probe)?;

    let objective = |layer: &dyn GradCheck| -> Result<f64> {
        let y = layer.forward()?;
        Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };

    let mut worst: f64 = 0.0;
    for (slot, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let original = layer.slots_mut()[slot].data()[i];
            layer.slots_mut()[slot].data_mut()[i] = original + eps;
            let hi = objective(layer)?;
            layer.slots_mut()[slot].data_mut()[i] = original - eps;
            let lo = objective(layer)?;
            layer.slots_mut()[slot].data_mut()[i] = original;

            let numeric = (hi - lo) / (2.0 * eps);
            let exact = grad.data()[i];
            let denom = exact.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

pub struct DenseCheck {
    pub params: DenseParams,
    pub input: Tensor,
}

impl GradCheck for DenseCheck {
    fn forward(&self) -> Result<Tensor> {
        dense_forward(&self.params, &self.input)
    }

    fn backward(&self, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let g = dense_backward(&self.params, &self.input, upstream)?;
        Ok(vec![g.weight, g.bias, g.input])
    }

    fn slots_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.params.weight, &mut self.params.bias, &mut self.input]
    }
}

pub struct ConvCheck {
    pub params: ConvParams,
    pub input: Tensor,
}

impl GradCheck for ConvCheck {
    fn forward(&self) -> Result<Tensor> {
        conv2d_forward(&self.params, &self.input)
    }

    fn backward(&self, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let g = conv2d_backward(&self.params, &self.input, upstream)?;
        Ok(vec![g.kernels, g.bias, g.input])
    }

    fn slots_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.params.kernels, &mut self.params.bias, &mut self.input]
    }
}

pub struct ReluCheck {
    pub input: Tensor,
}

impl GradCheck for ReluCheck {
    fn forward(&self) -> Result<Tensor> {
        Ok(relu(&self.input))
    }

    fn backward(&self, upstream: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![relu_backward(&self.input, upstream)?])
    }

    fn slots_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.input]
    }
}

/// Checks `d loss / d pred`; the target is held fixed.
pub struct MseCheck {
    pub pred: Tensor,
    pub target: Tensor,
}

impl GradCheck for MseCheck {
    fn forward(&self) -> Result<Tensor> {
        Ok(Tensor::vector(vec![mse_loss(&self.pred, &self.target)?]))
    }

    fn backward(&self, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let scale = upstream.data()[0];
        Ok(vec![mse_grad(&self.pred, &self.target)?.map(|g| g * scale)])
    }

    fn slots_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.pred]
    }
}

/// Tensor with entries uniform in `[-1, 1)`.
pub fn uniform_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches data length")
}

/// Tensor with entries uniform in `[-1, 1)` but at least `margin` from zero.
pub fn uniform_away_from_zero(shape: &[usize], margin: f64, rng: &mut impl Rng) -> Tensor {
    uniform_tensor(shape, rng).map(|v| {
        if v >= 0.0 {
            margin + v * (1.0 - margin)
        } else {
            -margin + v * (1.0 - margin)
        }
    })
}

pub fn random_dense(out_dim: usize, in_dim: usize, batch: Option<usize>, seed: u64) -> DenseCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_shape = match batch {
        Some(b) => vec![b, in_dim],
        None => vec![in_dim],
    };
    DenseCheck {
        params: DenseParams {
            weight: uniform_tensor(&[out_dim, in_dim], &mut rng),
            bias: uniform_tensor(&[out_dim], &mut rng),
        },
        input: uniform_tensor(&input_shape, &mut rng),
    }
}

pub fn random_conv(in_channels: usize, out_channels: usize, kernel: usize, side: usize, seed: u64) -> ConvCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ConvCheck {
        params: ConvParams {
            kernels: uniform_tensor(&[out_channels, in_channels, kernel, kernel], &mut rng),
            bias: uniform_tensor(&[out_channels], &mut rng),
            padding: kernel / 2,
        },
        input: uniform_tensor(&[in_channels, side, side], &mut rng),
    }
}
