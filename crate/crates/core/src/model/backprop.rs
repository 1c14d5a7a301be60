//! Cached forward pass and reverse-mode gradients through the whole network.

use super::{Model, BLOCK_LEN, BLOCK_SIDE, FRONT_PARAM_TENSORS, PARAM_TENSORS};
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, relu_backward, relu_in_place, Tensor,
};

/// Gradient tensors aligned with [`Model::params`] (or a prefix of it).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}

/// Inputs of every layer for one batch, kept for the backward pass.
///
/// Post-ReLU activations double as the ReLU masks: `relu(z) > 0` exactly
/// when `z > 0`.
pub struct Trace {
    /// Inputs of the four dense layers: blocks, measurements, then SDA outputs.
    dense_inputs: Vec<Tensor>,
    /// Inputs of the six conv layers, each `[batch, C, 33, 33]`.
    conv_inputs: Vec<Tensor>,
    /// Network output: `[batch, 1089]`, or the SDA output for a front-only trace.
    pub output: Tensor,
}

impl Model {
    /// Runs the full network on `[batch, 1089]` blocks, caching activations.
    pub fn forward_trace(&self, blocks: &Tensor) -> Result<Trace> {
        let mut trace = self.front_trace(blocks)?;
        let batch = blocks.shape()[0];
        let mut h = trace.output.clone().reshape(&[batch, 1, BLOCK_SIDE, BLOCK_SIDE])?;
        for (i, layer) in self.conv.iter().enumerate() {
            let next = conv2d_forward(layer, &h)?;
            trace.conv_inputs.push(h);
            h = next;
            if i + 1 < self.conv.len() {
                relu_in_place(&mut h);
            }
        }
        trace.output = h.reshape(&[batch, BLOCK_LEN])?;
        Ok(trace)
    }

    /// Runs only the sampling and autoencoder layers.
    pub fn front_trace(&self, blocks: &Tensor) -> Result<Trace> {
        if blocks.rank() != 2 || blocks.shape()[1] != BLOCK_LEN {
            return Err(Error::shape("forward_trace", &[0, BLOCK_LEN], blocks.shape()));
        }
        let mut dense_inputs = Vec::with_capacity(4);
        let mut h = blocks.clone();
        for layer in std::iter::once(&self.sampling).chain(&self.sda) {
            let mut next = dense_forward(layer, &h)?;
            relu_in_place(&mut next);
            dense_inputs.push(h);
            h = next;
        }
        Ok(Trace {
            dense_inputs,
            conv_inputs: Vec::with_capacity(6),
            output: h,
        })
    }

    /// Gradients of all 20 parameter tensors given `d loss / d output`.
    pub fn backward(&self, trace: &Trace, upstream: &Tensor) -> Result<Gradients> {
        if trace.conv_inputs.len() != self.conv.len() {
            return Err(Error::Config("backward needs a full forward trace".into()));
        }
        if upstream.shape() != trace.output.shape() {
            return Err(Error::shape("backward", trace.output.shape(), upstream.shape()));
        }
        let batch = upstream.shape()[0];
        let mut conv_grads = Vec::with_capacity(12);
        let mut g = upstream.clone().reshape(&[batch, 1, BLOCK_SIDE, BLOCK_SIDE])?;
        for i in (0..self.conv.len()).rev() {
            if i + 1 < self.conv.len() {
                g = relu_backward(&trace.conv_inputs[i + 1], &g)?;
            }
            let grads = conv2d_backward(&self.conv[i], &trace.conv_inputs[i], &g)?;
            conv_grads.push(grads.bias);
            conv_grads.push(grads.kernels);
            g = grads.input;
        }
        // conv[0]'s input is the last SDA activation
        let g = g.reshape(&[batch, BLOCK_LEN])?;
        let mut grads = self.front_backward(trace, &g)?;
        conv_grads.reverse();
        grads.0.extend(conv_grads);
        debug_assert_eq!(grads.0.len(), PARAM_TENSORS);
        Ok(grads)
    }

    /// Gradients of the eight sampling/autoencoder tensors given
    /// `d loss / d (SDA output)`.
    pub fn front_backward(&self, trace: &Trace, upstream: &Tensor) -> Result<Gradients> {
        let layers: Vec<_> = std::iter::once(&self.sampling).chain(&self.sda).collect();
        let sda_output = match trace.conv_inputs.first() {
            Some(map) => map.clone().reshape(&[upstream.shape()[0], BLOCK_LEN])?,
            None => trace.output.clone(),
        };
        if upstream.shape() != sda_output.shape() {
            return Err(Error::shape("front_backward", sda_output.shape(), upstream.shape()));
        }
        let mut grads = Vec::with_capacity(FRONT_PARAM_TENSORS);
        let mut g = upstream.clone();
        for i in (0..layers.len()).rev() {
            let activation = if i + 1 < layers.len() {
                &trace.dense_inputs[i + 1]
            } else {
                &sda_output
            };
            g = relu_backward(activation, &g)?;
            let lg = dense_backward(layers[i], &trace.dense_inputs[i], &g)?;
            grads.push(lg.bias);
            grads.push(lg.weight);
            g = lg.input;
        }
        grads.reverse();
        Ok(Gradients(grads))
    }
}
