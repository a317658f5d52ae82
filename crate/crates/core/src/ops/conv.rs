//! Dilated stride-1 2-D convolution with zero padding.
//!
//! The fast path lowers each batch item to a column matrix (im2col) and runs
//! one GEMM; [`conv2d_direct`] is the plain nested-loop form and is kept as
//! the reference the fast path is benchmarked and tested against.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ops::tape::{LayerKey, LayerTape, Record};
use crate::tensor::{Scalar, Tensor, TensorShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Same-size convolution: padding is `dilation * (kernel - 1) / 2`.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config("convolution channel counts must be >= 1".into()));
        }
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {kernel}")));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be >= 1".into()));
        }
        Ok(Self { in_channels, out_channels, kernel, dilation, padding: dilation * (kernel - 1) / 2 })
    }

    pub fn weight_shape(&self) -> TensorShape {
        TensorShape { batch: self.out_channels, channels: self.in_channels, height: self.kernel, width: self.kernel }
    }

    pub fn bias_shape(&self) -> TensorShape {
        TensorShape { batch: 1, channels: self.out_channels, height: 1, width: 1 }
    }

    /// Rows of the im2col matrix (`in_channels * kernel * kernel`).
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.fan_in() + self.out_channels
    }

    fn check_input(&self, input: TensorShape) -> Result<()> {
        if input.channels != self.in_channels {
            return Err(Error::Incompatible {
                op: "conv2d",
                detail: format!("input has {} channels, layer expects {}", input.channels, self.in_channels),
            });
        }
        Ok(())
    }

    fn check_params<T: Scalar>(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<()> {
        if weight.shape() != self.weight_shape() {
            return Err(Error::ShapeMismatch {
                op: "conv2d weight",
                expected: self.weight_shape(),
                actual: weight.shape(),
            });
        }
        if let Some(bias) = bias {
            if bias.shape() != self.bias_shape() {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    expected: self.bias_shape(),
                    actual: bias.shape(),
                });
            }
        }
        Ok(())
    }
}

/// Signed tap offset of kernel index `k` relative to the output pixel.
#[inline]
fn tap(k: usize, spec: &ConvSpec) -> isize {
    (k * spec.dilation) as isize - spec.padding as isize
}

/// Output columns `x` for which `x + off` lies inside `[0, w)`.
#[inline]
fn valid_range(off: isize, w: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (w as isize - off).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(item: &[T], spec: &ConvSpec, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    let k = spec.kernel;
    for c in 0..spec.in_channels {
        let plane = &item[c * hw..(c + 1) * hw];
        for ky in 0..k {
            let dy = tap(ky, spec);
            for kx in 0..k {
                let dx = tap(kx, spec);
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                let (x0, x1) = valid_range(dx, w);
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x0].fill(T::zero());
                    dst[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], spec: &ConvSpec, h: usize, w: usize, item: &mut [T]) {
    let hw = h * w;
    let k = spec.kernel;
    for c in 0..spec.in_channels {
        let plane = &mut item[c * hw..(c + 1) * hw];
        for ky in 0..k {
            let dy = tap(ky, spec);
            for kx in 0..k {
                let dx = tap(kx, spec);
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                let (x0, x1) = valid_range(dx, w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x1 - x0];
                    for (d, &g) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d = *d + g;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let s = input.shape();
    spec.check_input(s)?;
    spec.check_params(weight, Some(bias))?;
    let (h, w) = (s.height, s.width);
    let hw = h * w;
    let k_rows = spec.fan_in();
    let out_shape = s.with_channels(spec.out_channels);
    let mut out = Tensor::zeros(out_shape);
    let out_item = spec.out_channels * hw;
    let pointwise = spec.kernel == 1;

    out.data_mut().par_chunks_mut(out_item).enumerate().for_each_init(
        || if pointwise { Vec::new() } else { vec![T::zero(); k_rows * hw] },
        |cols, (b, dst)| {
            let item = input.item(b);
            let cols: &[T] = if pointwise {
                item
            } else {
                im2col(item, spec, h, w, cols);
                cols
            };
            T::gemm(spec.out_channels, k_rows, hw, weight.data(), false, cols, false, dst, false);
            for (o, row) in dst.chunks_mut(hw).enumerate() {
                let bo = bias.data()[o];
                row.iter_mut().for_each(|v| *v = *v + bo);
            }
        },
    );
    Ok(out)
}

/// Gradients of a convolution w.r.t. input, weight and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward_raw<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    spec.check_input(s)?;
    spec.check_params(weight, None)?;
    let expected = s.with_channels(spec.out_channels);
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch { op: "conv2d_backward", expected, actual: grad_out.shape() });
    }
    let (h, w) = (s.height, s.width);
    let hw = h * w;
    let k_rows = spec.fan_in();
    let oc = spec.out_channels;
    let pointwise = spec.kernel == 1;

    let mut grad_input = Tensor::zeros(s);
    let in_item = spec.in_channels * hw;
    let partials: Vec<(Vec<T>, Vec<T>)> = grad_input
        .data_mut()
        .par_chunks_mut(in_item)
        .enumerate()
        .map(|(b, gin)| {
            let gout = &grad_out.data()[b * oc * hw..(b + 1) * oc * hw];
            let item = input.item(b);
            let mut gw = vec![T::zero(); oc * k_rows];
            if pointwise {
                T::gemm(oc, hw, k_rows, gout, false, item, true, &mut gw, false);
                T::gemm(k_rows, oc, hw, weight.data(), true, gout, false, gin, false);
            } else {
                let mut cols = vec![T::zero(); k_rows * hw];
                im2col(item, spec, h, w, &mut cols);
                T::gemm(oc, hw, k_rows, gout, false, &cols, true, &mut gw, false);
                T::gemm(k_rows, oc, hw, weight.data(), true, gout, false, &mut cols, false);
                col2im(&cols, spec, h, w, gin);
            }
            let gb = gout.chunks(hw).map(|row| row.iter().copied().sum()).collect();
            (gw, gb)
        })
        .collect();

    // batch reduction in item order so results do not depend on scheduling
    let mut grad_weight = Tensor::zeros(spec.weight_shape());
    let mut grad_bias = Tensor::zeros(spec.bias_shape());
    for (gw, gb) in partials {
        for (a, b) in grad_weight.data_mut().iter_mut().zip(gw) {
            *a = *a + b;
        }
        for (a, b) in grad_bias.data_mut().iter_mut().zip(gb) {
            *a = *a + b;
        }
    }
    Ok(ConvGrads { input: grad_input, weight: grad_weight, bias: grad_bias })
}

/// Taped forward: caches the input for [`conv2d_backward`].
pub fn conv2d_forward_taped<T: Scalar>(
    tape: &mut LayerTape<T>,
    key: LayerKey,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out = conv2d_forward(input, weight, bias, spec)?;
    tape.push(key, Record::Conv { input: input.clone() });
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    tape: &mut LayerTape<T>,
    key: LayerKey,
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    match tape.pop(key, "conv")? {
        Record::Conv { input } => conv2d_backward_raw(grad_out, &input, weight, spec),
        _ => unreachable!("tape pop checks the record kind"),
    }
}

/// Direct nested-loop convolution. Reductions run over input channel, then
/// kernel row, then kernel column for every output element.
pub fn conv2d_direct<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let s = input.shape();
    spec.check_input(s)?;
    spec.check_params(weight, Some(bias))?;
    let (h, w) = (s.height as isize, s.width as isize);
    let k = spec.kernel;
    let mut out = Tensor::zeros(s.with_channels(spec.out_channels));
    for b in 0..s.batch {
        for o in 0..spec.out_channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    let mut acc = bias.data()[o];
                    for c in 0..spec.in_channels {
                        for ky in 0..k {
                            let sy = y as isize + tap(ky, spec);
                            if sy < 0 || sy >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let sx = x as isize + tap(kx, spec);
                                if sx < 0 || sx >= w {
                                    continue;
                                }
                                acc = acc + weight.at(o, c, ky, kx) * input.at(b, c, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set(b, o, y, x, acc);
                }
            }
        }
    }
    Ok(out)
}
