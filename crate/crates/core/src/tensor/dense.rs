use super::gemm::{axpy, dot, gemm, Mat};
use super::Tensor;
use crate::error::{Error, Result};

/// Fully connected layer parameters: `weight` is `[out_dim, in_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

impl DenseParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.shape()[0] != bias.shape()[0] {
            return Err(Error::shape("DenseParams::new", weight.shape(), bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Batches up to this size skip GEMM packing and walk the weight rows once.
const ROW_PATH_MAX_BATCH: usize = 2;

/// Splits `x` into (batch, in_dim), accepting `[in_dim]` or `[batch, in_dim]`.
fn batch_of(op: &'static str, p: &DenseParams, x: &Tensor) -> Result<usize> {
    match x.shape() {
        [n] if *n == p.in_dim() => Ok(1),
        [b, n] if *n == p.in_dim() => Ok(*b),
        _ => Err(Error::shape(op, p.weight.shape(), x.shape())),
    }
}

fn out_shape(x: &Tensor, out_dim: usize) -> Vec<usize> {
    if x.rank() == 1 {
        vec![out_dim]
    } else {
        vec![x.shape()[0], out_dim]
    }
}

/// `out = W x + b`, applied row-wise when `x` carries a batch dimension.
pub fn dense_forward(p: &DenseParams, x: &Tensor) -> Result<Tensor> {
    let batch = batch_of("dense_forward", p, x)?;
    let (out_dim, in_dim) = (p.out_dim(), p.in_dim());
    if batch <= ROW_PATH_MAX_BATCH {
        let mut out = Vec::with_capacity(batch * out_dim);
        for xb in x.data().chunks_exact(in_dim) {
            let rows = p.weight.data().chunks_exact(in_dim);
            out.extend(rows.zip(p.bias.data()).map(|(row, b)| b + dot(row, xb)));
        }
        return Tensor::new(out_shape(x, out_dim), out);
    }
    let mut out = Vec::with_capacity(batch * out_dim);
    for _ in 0..batch {
        out.extend_from_slice(p.bias.data());
    }
    gemm(
        Mat::new(x.data(), batch, in_dim),
        Mat::new(p.weight.data(), out_dim, in_dim).t(),
        1.0,
        &mut out,
    );
    Tensor::new(out_shape(x, out_dim), out)
}

pub fn dense_backward(p: &DenseParams, x: &Tensor, upstream: &Tensor) -> Result<DenseGrads> {
    let batch = batch_of("dense_backward", p, x)?;
    let (out_dim, in_dim) = (p.out_dim(), p.in_dim());
    let expected = out_shape(x, out_dim);
    if upstream.shape() != expected.as_slice() {
        return Err(Error::shape("dense_backward", &expected, upstream.shape()));
    }
    let mut grad_w = vec![0.0; out_dim * in_dim];
    let mut grad_x = vec![0.0; batch * in_dim];
    if batch <= ROW_PATH_MAX_BATCH {
        let rows = p.weight.data().chunks_exact(in_dim);
        for (o, (row, gw)) in rows.zip(grad_w.chunks_exact_mut(in_dim)).enumerate() {
            for b in 0..batch {
                let u = upstream.data()[b * out_dim + o];
                if u != 0.0 {
                    axpy(u, &x.data()[b * in_dim..][..in_dim], gw);
                    axpy(u, row, &mut grad_x[b * in_dim..][..in_dim]);
                }
            }
        }
    } else {
        let up = Mat::new(upstream.data(), batch, out_dim);
        gemm(up.t(), Mat::new(x.data(), batch, in_dim), 0.0, &mut grad_w);
        gemm(up, Mat::new(p.weight.data(), out_dim, in_dim), 0.0, &mut grad_x);
    }

    let mut grad_b = vec![0.0; out_dim];
    for row in upstream.data().chunks_exact(out_dim) {
        for (g, u) in grad_b.iter_mut().zip(row) {
            *g += u;
        }
    }

    Ok(DenseGrads {
        weight: Tensor::new(vec![out_dim, in_dim], grad_w)?,
        bias: Tensor::vector(grad_b),
        input: Tensor::new(x.shape().to_vec(), grad_x)?,
    })
}
