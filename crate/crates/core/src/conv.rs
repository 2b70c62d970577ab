//! 3x3 dilated convolution with "same" padding (padding = dilation).
//!
//! Kernels are stored `(out, in, 3, 3)`. Batches are processed in parallel
//! per sample; weight gradients are reduced in sample order so results are
//! bitwise reproducible regardless of thread scheduling.

use rayon::prelude::*;

use crate::tensor::Tensor;

pub const KERNEL: usize = 3;

/// Geometry of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * KERNEL * KERNEL
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.out_channels
    }
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Valid output range `[lo, hi)` along an axis of length `n` for tap offset `off`.
#[inline]
fn valid_range(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

#[inline]
fn tap_offset(k: usize, dilation: usize) -> isize {
    (k as isize - 1) * dilation as isize
}

fn forward_sample(shape: &ConvShape, h: usize, w: usize, input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let p = h * w;
    for oc in 0..shape.out_channels {
        let out_plane = &mut out[oc * p..(oc + 1) * p];
        out_plane.fill(bias[oc]);
        for ic in 0..shape.in_channels {
            let in_plane = &input[ic * p..(ic + 1) * p];
            let kbase = (oc * shape.in_channels + ic) * KERNEL * KERNEL;
            for ky in 0..KERNEL {
                let dy = tap_offset(ky, shape.dilation);
                let (ylo, yhi) = valid_range(h, dy);
                for kx in 0..KERNEL {
                    let wv = weight[kbase + ky * KERNEL + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = tap_offset(kx, shape.dilation);
                    let (xlo, xhi) = valid_range(w, dx);
                    if xlo >= xhi {
                        continue;
                    }
                    for y in ylo..yhi {
                        let iy = (y as isize + dy) as usize;
                        let src = &in_plane[iy * w + (xlo as isize + dx) as usize..][..xhi - xlo];
                        let dst = &mut out_plane[y * w + xlo..y * w + xhi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(input: &Tensor, shape: &ConvShape, weight: &[f64], bias: &[f64]) -> Tensor {
    let [n, c, h, w] = input.shape();
    assert_eq!(c, shape.in_channels, "conv input width");
    assert_eq!(weight.len(), shape.weight_len());
    assert_eq!(bias.len(), shape.out_channels);
    let mut out = Tensor::zeros(n, shape.out_channels, h, w);
    let in_len = input.sample_len();
    let out_len = out.sample_len();
    out.data_mut()
        .par_chunks_mut(out_len.max(1))
        .enumerate()
        .for_each(|(i, o)| {
            forward_sample(shape, h, w, &input.data()[i * in_len..(i + 1) * in_len], weight, bias, o)
        });
    out
}

fn backward_sample(
    shape: &ConvShape,
    h: usize,
    w: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let p = h * w;
    let mut gw = vec![0.0; shape.weight_len()];
    let mut gb = vec![0.0; shape.out_channels];
    for oc in 0..shape.out_channels {
        let go = &grad_out[oc * p..(oc + 1) * p];
        gb[oc] = go.iter().sum();
        for ic in 0..shape.in_channels {
            let in_plane = &input[ic * p..(ic + 1) * p];
            let gi_plane = &mut grad_in[ic * p..(ic + 1) * p];
            let kbase = (oc * shape.in_channels + ic) * KERNEL * KERNEL;
            for ky in 0..KERNEL {
                let dy = tap_offset(ky, shape.dilation);
                let (ylo, yhi) = valid_range(h, dy);
                for kx in 0..KERNEL {
                    let dx = tap_offset(kx, shape.dilation);
                    let (xlo, xhi) = valid_range(w, dx);
                    if xlo >= xhi {
                        continue;
                    }
                    let wv = weight[kbase + ky * KERNEL + kx];
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let iy = (y as isize + dy) as usize;
                        let off = iy * w + (xlo as isize + dx) as usize;
                        let g = &go[y * w + xlo..y * w + xhi];
                        let src = &in_plane[off..off + (xhi - xlo)];
                        acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        if wv != 0.0 {
                            let dst = &mut gi_plane[off..off + (xhi - xlo)];
                            for (d, gv) in dst.iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                    }
                    gw[kbase + ky * KERNEL + kx] = acc;
                }
            }
        }
    }
    (gw, gb)
}

pub fn conv2d_backward(input: &Tensor, shape: &ConvShape, weight: &[f64], grad_out: &Tensor) -> ConvGrads {
    let [n, c, h, w] = input.shape();
    assert_eq!(c, shape.in_channels);
    assert_eq!(grad_out.shape(), [n, shape.out_channels, h, w]);
    let mut grad_in = Tensor::zeros(n, c, h, w);
    let in_len = input.sample_len();
    let out_len = grad_out.sample_len();
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = grad_in
        .data_mut()
        .par_chunks_mut(in_len.max(1))
        .enumerate()
        .map(|(i, gi)| {
            backward_sample(
                shape,
                h,
                w,
                &input.data()[i * in_len..(i + 1) * in_len],
                weight,
                &grad_out.data()[i * out_len..(i + 1) * out_len],
                gi,
            )
        })
        .collect();
    let mut weight_grad = vec![0.0; shape.weight_len()];
    let mut bias_grad = vec![0.0; shape.out_channels];
    for (gw, gb) in per_sample {
        for (a, b) in weight_grad.iter_mut().zip(&gw) {
            *a += b;
        }
        for (a, b) in bias_grad.iter_mut().zip(&gb) {
            *a += b;
        }
    }
    ConvGrads {
        input: grad_in,
        weight: weight_grad,
        bias: bias_grad,
    }
}
