//! 2x2 max pooling that exports argmax switches, and the paired unpooling
//! that routes values back to those switches.

use crate::error::{Error, Result};
use crate::ops::tape::{LayerKey, LayerTape, Record};
use crate::tensor::{Scalar, Tensor, TensorShape};

/// Argmax switches of a 2x2 max pool.
///
/// `indices[i]` is the plane-local flat offset `y * W + x` in the pre-pool
/// input of the maximum feeding pooled element `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: TensorShape,
    output_shape: TensorShape,
    indices: Vec<u32>,
}

impl PoolIndices {
    /// Validates externally supplied switches: each must fall inside its own
    /// 2x2 window.
    pub fn from_raw(input_shape: TensorShape, indices: Vec<u32>) -> Result<Self> {
        let output_shape = pooled_shape(input_shape)?;
        if indices.len() != output_shape.numel() {
            return Err(Error::Incompatible {
                op: "PoolIndices",
                detail: format!("{} indices for pooled shape {output_shape}", indices.len()),
            });
        }
        let ow = output_shape.width;
        let iw = input_shape.width;
        for (i, &idx) in indices.iter().enumerate() {
            let (oy, ox) = ((i / ow) % output_shape.height, i % ow);
            let (y, x) = (idx as usize / iw, idx as usize % iw);
            if y / 2 != oy || x / 2 != ox || y >= input_shape.height {
                return Err(Error::Incompatible {
                    op: "PoolIndices",
                    detail: format!("index {idx} outside window ({oy}, {ox})"),
                });
            }
        }
        Ok(Self { input_shape, output_shape, indices })
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input_shape
    }

    pub fn output_shape(&self) -> TensorShape {
        self.output_shape
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.indices
    }
}

fn pooled_shape(input: TensorShape) -> Result<TensorShape> {
    if !input.height.is_multiple_of(2) || !input.width.is_multiple_of(2) {
        return Err(Error::NotDivisible { op: "maxpool2", height: input.height, width: input.width, multiple: 2 });
    }
    Ok(input.with_spatial(input.height / 2, input.width / 2))
}

/// Ties resolve to the first maximum in row-major window order.
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let s = input.shape();
    let os = pooled_shape(s)?;
    let (w, oh, ow) = (s.width, os.height, os.width);
    let mut out = Vec::with_capacity(os.numel());
    let mut indices = Vec::with_capacity(os.numel());
    for b in 0..s.batch {
        for c in 0..s.channels {
            let plane = input.plane(b, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if plane[cand] > plane[best] {
                            best = cand;
                        }
                    }
                    out.push(plane[best]);
                    indices.push(best as u32);
                }
            }
        }
    }
    Ok((Tensor::from_vec(os, out)?, PoolIndices { input_shape: s, output_shape: os, indices }))
}

pub fn maxpool2_backward_raw<T: Scalar>(grad_out: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if grad_out.shape() != indices.output_shape {
        return Err(Error::ShapeMismatch {
            op: "maxpool2_backward",
            expected: indices.output_shape,
            actual: grad_out.shape(),
        });
    }
    Ok(scatter(grad_out, indices))
}

fn scatter<T: Scalar>(values: &Tensor<T>, indices: &PoolIndices) -> Tensor<T> {
    let s = indices.input_shape;
    let op = indices.output_shape.plane();
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch {
        for c in 0..s.channels {
            let src = values.plane(b, c);
            let sw = &indices.indices[(b * s.channels + c) * op..][..op];
            let dst = out.plane_mut(b, c);
            for (&v, &i) in src.iter().zip(sw) {
                dst[i as usize] = dst[i as usize] + v;
            }
        }
    }
    out
}

fn gather<T: Scalar>(values: &Tensor<T>, indices: &PoolIndices) -> Tensor<T> {
    let os = indices.output_shape;
    let op = os.plane();
    let mut out = Vec::with_capacity(os.numel());
    for b in 0..os.batch {
        for c in 0..os.channels {
            let src = values.plane(b, c);
            let sw = &indices.indices[(b * os.channels + c) * op..][..op];
            out.extend(sw.iter().map(|&i| src[i as usize]));
        }
    }
    Tensor::from_vec(os, out).expect("gather length matches pooled shape")
}

/// Writes each value to its recorded switch position; every other cell is 0.
pub fn maxunpool2_forward<T: Scalar>(
    input: &Tensor<T>,
    indices: &PoolIndices,
    out_shape: TensorShape,
) -> Result<Tensor<T>> {
    if input.shape() != indices.output_shape {
        return Err(Error::ShapeMismatch { op: "maxunpool2", expected: indices.output_shape, actual: input.shape() });
    }
    if out_shape != indices.input_shape {
        return Err(Error::ShapeMismatch { op: "maxunpool2 output", expected: indices.input_shape, actual: out_shape });
    }
    Ok(scatter(input, indices))
}

pub fn maxunpool2_backward_raw<T: Scalar>(grad_out: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if grad_out.shape() != indices.input_shape {
        return Err(Error::ShapeMismatch {
            op: "maxunpool2_backward",
            expected: indices.input_shape,
            actual: grad_out.shape(),
        });
    }
    Ok(gather(grad_out, indices))
}

pub fn maxpool2_forward_taped<T: Scalar>(
    tape: &mut LayerTape<T>,
    key: LayerKey,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, PoolIndices)> {
    let (out, indices) = maxpool2_forward(input)?;
    tape.push(key, Record::Pool { indices: indices.clone() });
    Ok((out, indices))
}

pub fn maxpool2_backward<T: Scalar>(tape: &mut LayerTape<T>, key: LayerKey, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    match tape.pop(key, "maxpool")? {
        Record::Pool { indices } => maxpool2_backward_raw(grad_out, &indices),
        _ => unreachable!("tape pop checks the record kind"),
    }
}

pub fn maxunpool2_forward_taped<T: Scalar>(
    tape: &mut LayerTape<T>,
    key: LayerKey,
    input: &Tensor<T>,
    indices: &PoolIndices,
    out_shape: TensorShape,
) -> Result<Tensor<T>> {
    let out = maxunpool2_forward(input, indices, out_shape)?;
    tape.push(key, Record::Unpool { indices: indices.clone() });
    Ok(out)
}

pub fn maxunpool2_backward<T: Scalar>(
    tape: &mut LayerTape<T>,
    key: LayerKey,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    match tape.pop(key, "maxunpool")? {
        Record::Unpool { indices } => maxunpool2_backward_raw(grad_out, &indices),
        _ => unreachable!("tape pop checks the record kind"),
    }
}

/// Largest number of nonzeros found in any 2x2 block of any plane.
pub fn max_nonzeros_per_block<T: Scalar>(t: &Tensor<T>) -> usize {
    let s = t.shape();
    let mut worst = 0;
    for b in 0..s.batch {
        for c in 0..s.channels {
            let p = t.plane(b, c);
            for by in (0..s.height).step_by(2) {
                for bx in (0..s.width).step_by(2) {
                    let mut n = 0;
                    for y in by..(by + 2).min(s.height) {
                        for x in bx..(bx + 2).min(s.width) {
                            n += usize::from(p[y * s.width + x] != T::zero());
                        }
                    }
                    worst = worst.max(n);
                }
            }
        }
    }
    worst
}
