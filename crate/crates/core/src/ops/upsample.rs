//! 2x bilinear upsampling with half-pixel centers (`align_corners = false`).

use crate::error::{Error, Result};
use crate::ops::tape::{LayerKey, LayerTape, Record};
use crate::tensor::{Scalar, Tensor, TensorShape};

/// Source taps `(i0, i1, w0, w1)` for each of the `2 * n` output positions.
fn taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub fn bilinear_upsample2<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let os = s.with_spatial(2 * s.height, 2 * s.width);
    let ty = taps(s.height);
    let tx = taps(s.width);
    let mut out = Tensor::zeros(os);
    for b in 0..s.batch {
        for c in 0..s.channels {
            let src = input.plane(b, c).to_vec();
            let dst = out.plane_mut(b, c);
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (T::from_f64(wx0), T::from_f64(wx1));
                    let top = src[y0 * s.width + x0] * wx0 + src[y0 * s.width + x1] * wx1;
                    let bot = src[y1 * s.width + x0] * wx0 + src[y1 * s.width + x1] * wx1;
                    dst[oy * os.width + ox] = top * wy0 + bot * wy1;
                }
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_upsample2`] for an input of `input_shape`.
pub fn bilinear_upsample2_backward_raw<T: Scalar>(grad_out: &Tensor<T>, input_shape: TensorShape) -> Result<Tensor<T>> {
    let os = input_shape.with_spatial(2 * input_shape.height, 2 * input_shape.width);
    if grad_out.shape() != os {
        return Err(Error::ShapeMismatch { op: "bilinear_upsample2_backward", expected: os, actual: grad_out.shape() });
    }
    let ty = taps(input_shape.height);
    let tx = taps(input_shape.width);
    let w = input_shape.width;
    let mut grad = Tensor::zeros(input_shape);
    for b in 0..input_shape.batch {
        for c in 0..input_shape.channels {
            let g = grad_out.plane(b, c);
            let dst = grad.plane_mut(b, c);
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (T::from_f64(wx0), T::from_f64(wx1));
                    let v = g[oy * os.width + ox];
                    let top = v * wy0;
                    let bot = v * wy1;
                    dst[y0 * w + x0] = dst[y0 * w + x0] + top * wx0;
                    dst[y0 * w + x1] = dst[y0 * w + x1] + top * wx1;
                    dst[y1 * w + x0] = dst[y1 * w + x0] + bot * wx0;
                    dst[y1 * w + x1] = dst[y1 * w + x1] + bot * wx1;
                }
            }
        }
    }
    Ok(grad)
}

pub fn bilinear_upsample2_taped<T: Scalar>(tape: &mut LayerTape<T>, key: LayerKey, input: &Tensor<T>) -> Tensor<T> {
    tape.push(key, Record::Upsample { input_shape: input.shape() });
    bilinear_upsample2(input)
}

pub fn bilinear_upsample2_backward<T: Scalar>(
    tape: &mut LayerTape<T>,
    key: LayerKey,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    match tape.pop(key, "upsample")? {
        Record::Upsample { input_shape } => bilinear_upsample2_backward_raw(grad_out, input_shape),
        _ => unreachable!("tape pop checks the record kind"),
    }
}
