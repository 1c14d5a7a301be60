//! The ten-layer joint sampling/reconstruction network.
//!
//! Layer 1 is a ReLU-activated fully connected sampling layer producing `m`
//! measurements per 33x33 block. Layers 2-4 form a stacked denoising
//! autoencoder (1089 -> 272 -> 1089, ReLU after each) lifting the
//! measurements back to block size. Layers 5-10 are convolutions with
//! (kernel, channels) = (11, 64), (1, 32), (7, 1), (11, 64), (1, 32), (7, 1),
//! ReLU after all but the last, all size-preserving on the 33x33 map.

mod backprop;
mod io;

pub use backprop::{Gradients, Trace};
pub use io::{load_model, save_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{conv2d_forward, dense_forward, relu_in_place, ConvParams, DenseParams, Tensor};

pub const BLOCK_SIDE: usize = 33;
pub const BLOCK_LEN: usize = BLOCK_SIDE * BLOCK_SIDE;

/// Output widths of the three autoencoder layers.
pub const SDA_WIDTHS: [usize; 3] = [1089, 272, 1089];

/// (kernel size, output channels) of the six convolution layers.
pub const CONV_LAYOUT: [(usize, usize); 6] = [(11, 64), (1, 32), (7, 1), (11, 64), (1, 32), (7, 1)];

/// Number of parameter tensors (weight and bias per layer).
pub const PARAM_TENSORS: usize = 20;

/// Parameter tensors belonging to the sampling and autoencoder layers.
pub const FRONT_PARAM_TENSORS: usize = 8;

/// The four supported measurement rates, in descending order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MeasurementRate {
    R25,
    R10,
    R04,
    R01,
}

impl MeasurementRate {
    pub const ALL: [MeasurementRate; 4] = [Self::R25, Self::R10, Self::R04, Self::R01];

    pub fn value(self) -> f64 {
        match self {
            Self::R25 => 0.25,
            Self::R10 => 0.10,
            Self::R04 => 0.04,
            Self::R01 => 0.01,
        }
    }

    /// Measurements per block, `floor(rate * 1089)`.
    pub fn measurements(self) -> usize {
        match self {
            Self::R25 => 272,
            Self::R10 => 108,
            Self::R04 => 43,
            Self::R01 => 10,
        }
    }

    pub fn from_value(value: f64) -> Result<Self> {
        Self::ALL.into_iter().find(|r| r.value() == value).ok_or_else(|| {
            Error::Config(format!(
                "unsupported measurement rate {value} (expected 0.25, 0.10, 0.04 or 0.01)"
            ))
        })
    }
}

impl fmt::Display for MeasurementRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}", self.value())
    }
}

impl FromStr for MeasurementRate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "0.25" => Ok(Self::R25),
            "0.10" | "0.1" => Ok(Self::R10),
            "0.04" => Ok(Self::R04),
            "0.01" => Ok(Self::R01),
            other => Err(Error::Config(format!(
                "unsupported measurement rate `{other}` (expected 0.25, 0.10, 0.04 or 0.01)"
            ))),
        }
    }
}

/// One 33x33 block flattened row-major, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockVector(Tensor);

impl BlockVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != BLOCK_LEN {
            return Err(Error::shape("BlockVector::new", &[BLOCK_LEN], &[values.len()]));
        }
        Ok(Self(Tensor::vector(values)))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.len() != BLOCK_LEN {
            return Err(Error::shape("BlockVector::from_tensor", &[BLOCK_LEN], t.shape()));
        }
        Ok(Self(t.reshape(&[BLOCK_LEN])?))
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// The block as a single-channel `[1, 33, 33]` map.
    pub fn to_map(&self) -> Tensor {
        self.0
            .clone()
            .reshape(&[1, BLOCK_SIDE, BLOCK_SIDE])
            .expect("block length is 1089")
    }
}

/// Full parameter set for one measurement rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub rate: MeasurementRate,
    pub seed: u64,
    pub sampling: DenseParams,
    pub sda: [DenseParams; 3],
    pub conv: [ConvParams; 6],
}

/// Expected `(weight shape, bias shape)` of every layer, in file order.
pub fn layer_shapes(rate: MeasurementRate) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut shapes = Vec::with_capacity(10);
    let mut width = BLOCK_LEN;
    for out in std::iter::once(rate.measurements()).chain(SDA_WIDTHS) {
        shapes.push((vec![out, width], vec![out]));
        width = out;
    }
    let mut channels = 1;
    for (k, out) in CONV_LAYOUT {
        shapes.push((vec![out, channels, k, k], vec![out]));
        channels = out;
    }
    shapes
}

/// Layer names used in diagnostics and file sections.
pub fn layer_name(index: usize) -> String {
    match index {
        0 => "sampling".into(),
        1..=3 => format!("sda[{}]", index - 1),
        _ => format!("conv[{}]", index - 4),
    }
}

/// Builds a model with the layer dimensions for `rate`.
///
/// Weights are zero-mean Gaussian with standard deviation `sqrt(2 / fan_in)`
/// and biases are zero; the draw is fully determined by `seed`.
pub fn build_model(rate: MeasurementRate, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |shape: &[usize]| {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| normal.sample(&mut rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    };
    let shapes = layer_shapes(rate);
    let dense: Vec<DenseParams> = shapes[..4]
        .iter()
        .map(|(w, b)| DenseParams {
            weight: gaussian(w),
            bias: Tensor::zeros(b),
        })
        .collect();
    let conv: Vec<ConvParams> = shapes[4..]
        .iter()
        .map(|(w, b)| ConvParams {
            kernels: gaussian(w),
            bias: Tensor::zeros(b),
            padding: w[2] / 2,
        })
        .collect();
    Model::assemble(rate, seed, dense, conv)
}

impl Model {
    /// All-zero parameters with the correct dimensions.
    pub fn zeros(rate: MeasurementRate) -> Model {
        let shapes = layer_shapes(rate);
        let dense = shapes[..4]
            .iter()
            .map(|(w, _)| DenseParams::zeros(w[0], w[1]))
            .collect();
        let conv = shapes[4..]
            .iter()
            .map(|(w, _)| ConvParams::zeros(w[0], w[1], w[2]))
            .collect();
        Model::assemble(rate, 0, dense, conv)
    }

    fn assemble(rate: MeasurementRate, seed: u64, dense: Vec<DenseParams>, conv: Vec<ConvParams>) -> Model {
        let mut dense = dense.into_iter();
        let sampling = dense.next().expect("four dense layers");
        let sda: [DenseParams; 3] = dense.collect::<Vec<_>>().try_into().expect("three sda layers");
        let conv: [ConvParams; 6] = conv.try_into().expect("six conv layers");
        Model {
            rate,
            seed,
            sampling,
            sda,
            conv,
        }
    }

    pub fn measurements(&self) -> usize {
        self.rate.measurements()
    }

    /// Parameter tensors in fixed order: per layer weight then bias, sampling
    /// first and the last convolution last.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(PARAM_TENSORS);
        for d in std::iter::once(&self.sampling).chain(&self.sda) {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        for c in &self.conv {
            out.push(&c.kernels);
            out.push(&c.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(PARAM_TENSORS);
        for d in std::iter::once(&mut self.sampling).chain(&mut self.sda) {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        for c in &mut self.conv {
            out.push(&mut c.kernels);
            out.push(&mut c.bias);
        }
        out
    }

    /// Parameter names aligned with [`Model::params`].
    pub fn param_names() -> Vec<String> {
        (0..10)
            .flat_map(|i| {
                let layer = layer_name(i);
                let weight = if i < 4 { "weight" } else { "kernels" };
                [format!("{layer}.{weight}"), format!("{layer}.bias")]
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }

    /// Checks every layer against the dimensions for this model's rate.
    pub fn validate(&self) -> Result<()> {
        let expected = layer_shapes(self.rate);
        let params = self.params();
        for (i, (w, b)) in expected.iter().enumerate() {
            let (pw, pb) = (params[2 * i], params[2 * i + 1]);
            if pw.shape() != w.as_slice() {
                return Err(Error::shape("Model::validate", w, pw.shape()));
            }
            if pb.shape() != b.as_slice() {
                return Err(Error::shape("Model::validate", b, pb.shape()));
            }
        }
        for c in &self.conv {
            if c.padding != c.kernel_size() / 2 {
                return Err(Error::Config(format!(
                    "conv padding {} for kernel {}",
                    c.padding,
                    c.kernel_size()
                )));
            }
        }
        Ok(())
    }

    /// Measurement vector `relu(W1 x + b1)` of one block.
    pub fn sample(&self, block: &BlockVector) -> Result<Tensor> {
        let mut y = dense_forward(&self.sampling, block.as_tensor())?;
        relu_in_place(&mut y);
        Ok(y)
    }

    /// Autoencoder stage: measurements to a coarse block estimate.
    pub fn initial_reconstruct(&self, y: &Tensor) -> Result<BlockVector> {
        if y.shape() != [self.measurements()] {
            return Err(Error::shape("initial_reconstruct", &[self.measurements()], y.shape()));
        }
        BlockVector::from_tensor(self.sda_forward(y.clone())?)
    }

    /// Convolutional refinement of a `[1, 33, 33]` map.
    pub fn deep_reconstruct(&self, block_image: &Tensor) -> Result<Tensor> {
        if block_image.shape() != [1, BLOCK_SIDE, BLOCK_SIDE] {
            return Err(Error::shape(
                "deep_reconstruct",
                &[1, BLOCK_SIDE, BLOCK_SIDE],
                block_image.shape(),
            ));
        }
        self.conv_forward(block_image.clone())
    }

    /// Sample, lift and refine one block.
    pub fn forward(&self, block: &BlockVector) -> Result<BlockVector> {
        let y = self.sample(block)?;
        let coarse = self.initial_reconstruct(&y)?;
        BlockVector::from_tensor(self.deep_reconstruct(&coarse.to_map())?)
    }

    /// Measurements for a `[batch, 1089]` stack of blocks.
    pub fn sample_batch(&self, blocks: &Tensor) -> Result<Tensor> {
        if blocks.rank() != 2 || blocks.shape()[1] != BLOCK_LEN {
            return Err(Error::shape("sample_batch", &[0, BLOCK_LEN], blocks.shape()));
        }
        let mut y = dense_forward(&self.sampling, blocks)?;
        relu_in_place(&mut y);
        Ok(y)
    }

    /// Reconstructs a `[batch, m]` stack of measurements into `[batch, 1089]`.
    pub fn reconstruct_batch(&self, measurements: &Tensor) -> Result<Tensor> {
        if measurements.rank() != 2 || measurements.shape()[1] != self.measurements() {
            return Err(Error::shape(
                "reconstruct_batch",
                &[0, self.measurements()],
                measurements.shape(),
            ));
        }
        let batch = measurements.shape()[0];
        let coarse = self.sda_forward(measurements.clone())?;
        let refined = self.conv_forward(coarse.reshape(&[batch, 1, BLOCK_SIDE, BLOCK_SIDE])?)?;
        refined.reshape(&[batch, BLOCK_LEN])
    }

    pub fn forward_batch(&self, blocks: &Tensor) -> Result<Tensor> {
        self.reconstruct_batch(&self.sample_batch(blocks)?)
    }

    fn sda_forward(&self, mut h: Tensor) -> Result<Tensor> {
        for layer in &self.sda {
            h = dense_forward(layer, &h)?;
            relu_in_place(&mut h);
        }
        Ok(h)
    }

    fn conv_forward(&self, mut h: Tensor) -> Result<Tensor> {
        for (i, layer) in self.conv.iter().enumerate() {
            h = conv2d_forward(layer, &h)?;
            if i + 1 < self.conv.len() {
                relu_in_place(&mut h);
            }
        }
        Ok(h)
    }
}
