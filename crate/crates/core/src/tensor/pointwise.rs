use super::Tensor;
use crate::error::{Error, Result};

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_in_place(x: &mut Tensor) {
    for v in x.data_mut() {
        *v = v.max(0.0);
    }
}

/// Gradient passes only where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if !x.same_shape(upstream) {
        return Err(Error::shape("relu_backward", x.shape(), upstream.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Number of samples: the leading dimension of a batched tensor, 1 otherwise.
fn sample_count(t: &Tensor) -> usize {
    if t.rank() >= 2 {
        t.shape()[0]
    } else {
        1
    }
}

/// Mean over samples of the per-sample squared Euclidean error.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::shape("mse_loss", pred.shape(), target.shape()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / sample_count(pred) as f64)
}

pub fn mse_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if !pred.same_shape(target) {
        return Err(Error::shape("mse_grad", pred.shape(), target.shape()));
    }
    let scale = 2.0 / sample_count(pred) as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| scale * (p - t))
        .collect();
    Tensor::new(pred.shape().to_vec(), data)
}
