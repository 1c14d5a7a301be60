use super::gemm::{dot, gemm, Mat};
use super::Tensor;
use crate::error::{Error, Result};

/// Square-kernel 2-D convolution (cross-correlation), stride 1.
///
/// `kernels` is `[out_channels, in_channels, k, k]`. Padding must equal
/// `k / 2` so the output keeps the input's spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

impl ConvParams {
    pub fn new(kernels: Tensor, bias: Tensor, padding: usize) -> Result<Self> {
        let ks = kernels.shape();
        if ks.len() != 4 || bias.rank() != 1 || ks[0] != bias.shape()[0] {
            return Err(Error::shape("ConvParams::new", ks, bias.shape()));
        }
        if ks[2] != ks[3] {
            return Err(Error::Config(format!(
                "kernels must be square, got {}x{}",
                ks[2], ks[3]
            )));
        }
        if padding != ks[2] / 2 {
            return Err(Error::Config(format!(
                "padding {padding} does not preserve size for kernel {k} (expected {})",
                ks[2] / 2,
                k = ks[2]
            )));
        }
        Ok(Self { kernels, bias, padding })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Self {
            kernels: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
            padding: kernel / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }

    fn check(&self) -> Result<()> {
        if self.padding != self.kernel_size() / 2 {
            return Err(Error::Config(format!(
                "padding {} does not preserve size for kernel {}",
                self.padding,
                self.kernel_size()
            )));
        }
        Ok(())
    }
}

/// (batch, height, width) of a `[C, H, W]` or `[B, C, H, W]` input.
fn geometry(op: &'static str, p: &ConvParams, x: &Tensor) -> Result<(usize, usize, usize)> {
    p.check()?;
    match *x.shape() {
        [c, h, w] if c == p.in_channels() => Ok((1, h, w)),
        [b, c, h, w] if c == p.in_channels() => Ok((b, h, w)),
        _ => Err(Error::shape(op, p.kernels.shape(), x.shape())),
    }
}

fn out_shape(x: &Tensor, out_channels: usize) -> Vec<usize> {
    let mut shape = x.shape().to_vec();
    let channel_axis = shape.len() - 3;
    shape[channel_axis] = out_channels;
    shape
}

/// Unrolls one `[C, H, W]` sample into a `[C*k*k, H*W]` patch matrix.
fn im2col(input: &[f64], channels: usize, h: usize, w: usize, k: usize, pad: usize, col: &mut [f64]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * hw..][..hw];
                // valid output columns for this horizontal tap
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                for oy in 0..h {
                    let out_row = &mut row[oy * w..(oy + 1) * w];
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h || x_lo >= x_hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[(iy - pad) * w..][..w];
                    out_row[..x_lo].fill(0.0);
                    out_row[x_hi..].fill(0.0);
                    let ix_lo = x_lo + kx - pad;
                    out_row[x_lo..x_hi].copy_from_slice(&src[ix_lo..ix_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
fn col2im(col: &[f64], channels: usize, h: usize, w: usize, k: usize, pad: usize, out: &mut [f64]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * hw..][..hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let ix_lo = x_lo + kx - pad;
                    let dst = &mut plane[(iy - pad) * w + ix_lo..][..x_hi - x_lo];
                    for (d, s) in dst.iter_mut().zip(&row[oy * w + x_lo..oy * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

// Single-output-channel kernels. With one output channel the patch-matrix
// product degenerates to a matrix-vector product, so these work on a
// zero-padded copy of each input plane instead. Output rows are laid out with
// the padded row width, which turns every kernel tap into one contiguous
// multiply-add over the whole plane; the extra columns are discarded.

/// Dot product with a fixed eight-lane accumulation order.
/// Copies a `h x w` plane into the interior of a zeroed `(h+2p) x (w+2p)` buffer.
fn pad_plane(plane: &[f64], h: usize, w: usize, pad: usize, dst: &mut [f64]) {
    let wp = w + 2 * pad;
    dst.fill(0.0);
    for y in 0..h {
        dst[(y + pad) * wp + pad..][..w].copy_from_slice(&plane[y * w..(y + 1) * w]);
    }
}

#[allow(clippy::too_many_arguments)]
fn direct_forward_single(
    kernel: &[f64],
    input: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    out: &mut [f64],
) {
    let (hw, wp) = (h * w, w + 2 * pad);
    // the last row only needs its first `w` columns
    let span = (h - 1) * wp + w;
    let mut padded = vec![0.0; (h + 2 * pad) * wp];
    let mut wide = vec![0.0; span];
    for c in 0..channels {
        pad_plane(&input[c * hw..(c + 1) * hw], h, w, pad, &mut padded);
        for ky in 0..k {
            for kx in 0..k {
                let weight = kernel[(c * k + ky) * k + kx];
                let src = &padded[ky * wp + kx..][..span];
                for (d, s) in wide.iter_mut().zip(src) {
                    *d += weight * s;
                }
            }
        }
    }
    for y in 0..h {
        for (o, v) in out[y * w..(y + 1) * w].iter_mut().zip(&wide[y * wp..y * wp + w]) {
            *o += v;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn direct_backward_single(
    kernel: &[f64],
    input: &[f64],
    upstream: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    grad_kernel: &mut [f64],
    grad_input: &mut [f64],
) {
    let (hw, wp) = (h * w, w + 2 * pad);
    let span = (h - 1) * wp + w;
    // upstream laid out with padded row width, zeros in the unused columns
    let mut wide_up = vec![0.0; span];
    for y in 0..h {
        wide_up[y * wp..y * wp + w].copy_from_slice(&upstream[y * w..(y + 1) * w]);
    }
    let mut padded = vec![0.0; (h + 2 * pad) * wp];
    let mut grad_padded = vec![0.0; (h + 2 * pad) * wp];
    for c in 0..channels {
        pad_plane(&input[c * hw..(c + 1) * hw], h, w, pad, &mut padded);
        grad_padded.fill(0.0);
        for ky in 0..k {
            for kx in 0..k {
                let idx = (c * k + ky) * k + kx;
                let offset = ky * wp + kx;
                let src = &padded[offset..][..span];
                grad_kernel[idx] += dot(&wide_up, src);
                let weight = kernel[idx];
                for (g, u) in grad_padded[offset..][..span].iter_mut().zip(&wide_up) {
                    *g += weight * u;
                }
            }
        }
        let gplane = &mut grad_input[c * hw..(c + 1) * hw];
        for y in 0..h {
            for (g, v) in gplane[y * w..(y + 1) * w]
                .iter_mut()
                .zip(&grad_padded[(y + pad) * wp + pad..][..w])
            {
                *g += v;
            }
        }
    }
}

pub fn conv2d_forward(p: &ConvParams, x: &Tensor) -> Result<Tensor> {
    let (batch, h, w) = geometry("conv2d_forward", p, x)?;
    let (oc, ic, k) = (p.out_channels(), p.in_channels(), p.kernel_size());
    let (hw, rows) = (h * w, ic * k * k);
    let kernels = Mat::new(p.kernels.data(), oc, rows);
    let mut out = vec![0.0; batch * oc * hw];
    let direct = oc == 1 && k > 1;
    let mut col = if k == 1 || direct {
        Vec::new()
    } else {
        vec![0.0; rows * hw]
    };
    for b in 0..batch {
        let sample = &x.data()[b * ic * hw..(b + 1) * ic * hw];
        let dst = &mut out[b * oc * hw..(b + 1) * oc * hw];
        for (o, plane) in dst.chunks_exact_mut(hw).enumerate() {
            plane.fill(p.bias.data()[o]);
        }
        if direct {
            direct_forward_single(p.kernels.data(), sample, ic, h, w, k, p.padding, dst);
            continue;
        }
        let patches = if k == 1 {
            sample
        } else {
            im2col(sample, ic, h, w, k, p.padding, &mut col);
            &col
        };
        gemm(kernels, Mat::new(patches, rows, hw), 1.0, dst);
    }
    Tensor::new(out_shape(x, oc), out)
}

pub fn conv2d_backward(p: &ConvParams, x: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
    let (batch, h, w) = geometry("conv2d_backward", p, x)?;
    let (oc, ic, k) = (p.out_channels(), p.in_channels(), p.kernel_size());
    let expected = out_shape(x, oc);
    if upstream.shape() != expected.as_slice() {
        return Err(Error::shape("conv2d_backward", &expected, upstream.shape()));
    }
    let (hw, rows) = (h * w, ic * k * k);
    let kernels = Mat::new(p.kernels.data(), oc, rows);

    let mut grad_k = vec![0.0; oc * rows];
    let mut grad_b = vec![0.0; oc];
    let mut grad_x = vec![0.0; x.len()];
    let direct = oc == 1 && k > 1;
    let buffered = k > 1 && !direct;
    let mut col = if buffered { vec![0.0; rows * hw] } else { Vec::new() };
    let mut grad_col = if buffered { vec![0.0; rows * hw] } else { Vec::new() };

    for b in 0..batch {
        let sample = &x.data()[b * ic * hw..(b + 1) * ic * hw];
        let up = &upstream.data()[b * oc * hw..(b + 1) * oc * hw];
        for (g, plane) in grad_b.iter_mut().zip(up.chunks_exact(hw)) {
            *g += plane.iter().sum::<f64>();
        }
        let gx = &mut grad_x[b * ic * hw..(b + 1) * ic * hw];
        if direct {
            direct_backward_single(p.kernels.data(), sample, up, ic, h, w, k, p.padding, &mut grad_k, gx);
            continue;
        }
        let up = Mat::new(up, oc, hw);
        if k == 1 {
            gemm(up, Mat::new(sample, rows, hw).t(), 1.0, &mut grad_k);
            gemm(kernels.t(), up, 0.0, gx);
        } else {
            im2col(sample, ic, h, w, k, p.padding, &mut col);
            gemm(up, Mat::new(&col, rows, hw).t(), 1.0, &mut grad_k);
            gemm(kernels.t(), up, 0.0, &mut grad_col);
            col2im(&grad_col, ic, h, w, k, p.padding, gx);
        }
    }

    Ok(ConvGrads {
        kernels: Tensor::new(p.kernels.shape().to_vec(), grad_k)?,
        bias: Tensor::vector(grad_b),
        input: Tensor::new(x.shape().to_vec(), grad_x)?,
    })
}
