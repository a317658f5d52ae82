//! Differentiable layer kernels with hand-written backward passes.
//!
//! Each kernel comes in two forms: a pure function (`*_forward`, `*_raw`)
//! and a taped variant that caches what the backward pass needs on a
//! [`LayerTape`].

pub mod conv;
pub mod pool;
pub mod tape;
pub mod upsample;

pub use conv::{
    conv2d_backward, conv2d_backward_raw, conv2d_direct, conv2d_forward, conv2d_forward_taped, ConvGrads, ConvSpec,
};
pub use pool::{
    max_nonzeros_per_block, maxpool2_backward, maxpool2_backward_raw, maxpool2_forward, maxpool2_forward_taped,
    maxunpool2_backward, maxunpool2_backward_raw, maxunpool2_forward, maxunpool2_forward_taped, PoolIndices,
};
pub use tape::{LayerKey, LayerTape};
pub use upsample::{
    bilinear_upsample2, bilinear_upsample2_backward, bilinear_upsample2_backward_raw, bilinear_upsample2_taped,
};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use tape::Record;

pub fn relu_taped<T: Scalar>(tape: &mut LayerTape<T>, key: LayerKey, input: &Tensor<T>) -> Tensor<T> {
    let out = input.relu();
    tape.push(key, Record::Relu { output: out.clone() });
    out
}

pub fn relu_backward<T: Scalar>(tape: &mut LayerTape<T>, key: LayerKey, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    match tape.pop(key, "relu")? {
        Record::Relu { output } => {
            output.zip_map(grad_out, "relu_backward", |o, g| if o > T::zero() { g } else { T::zero() })
        }
        _ => unreachable!("tape pop checks the record kind"),
    }
}

/// Parameters of one residual block: two same-size 3x3 convolutions.
#[derive(Clone, Copy, Debug)]
pub struct ResBlockParams<'a, T: Scalar> {
    pub w1: &'a Tensor<T>,
    pub b1: &'a Tensor<T>,
    pub w2: &'a Tensor<T>,
    pub b2: &'a Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ResBlockGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

fn resblock_spec(channels: usize, dilation: usize) -> Result<ConvSpec> {
    ConvSpec::new(channels, channels, 3, dilation)
}

/// `x + conv2(relu(conv1(x)))`.
pub fn resblock_forward<T: Scalar>(
    tape: &mut LayerTape<T>,
    key: LayerKey,
    input: &Tensor<T>,
    params: ResBlockParams<'_, T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let channels = params.w1.shape().batch;
    if input.shape().channels != channels {
        return Err(Error::Incompatible {
            op: "resblock",
            detail: format!("input has {} channels, block has {channels}", input.shape().channels),
        });
    }
    let spec = resblock_spec(channels, dilation)?;
    let h = conv2d_forward_taped(tape, key.slot(0), input, params.w1, params.b1, &spec)?;
    let a = relu_taped(tape, key.slot(1), &h);
    let mut out = conv2d_forward_taped(tape, key.slot(2), &a, params.w2, params.b2, &spec)?;
    out.add_inplace(input)?;
    Ok(out)
}

pub fn resblock_backward<T: Scalar>(
    tape: &mut LayerTape<T>,
    key: LayerKey,
    grad_out: &Tensor<T>,
    params: ResBlockParams<'_, T>,
    dilation: usize,
) -> Result<ResBlockGrads<T>> {
    let spec = resblock_spec(params.w1.shape().batch, dilation)?;
    let g2 = conv2d_backward(tape, key.slot(2), grad_out, params.w2, &spec)?;
    let ga = relu_backward(tape, key.slot(1), &g2.input)?;
    let g1 = conv2d_backward(tape, key.slot(0), &ga, params.w1, &spec)?;
    let mut input = g1.input;
    input.add_inplace(grad_out)?;
    Ok(ResBlockGrads { input, w1: g1.weight, b1: g1.bias, w2: g2.weight, b2: g2.bias })
}
