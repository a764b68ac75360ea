//! Residual block: relu(conv2(relu(conv1(x))) + x).
//!
//! Both convolutions must preserve spatial dims and channel count
//! (k odd, padding (k-1)/2, stride 1) so the shortcut addition is valid.

use crate::error::{Error, Result};
use crate::layers::conv3d::{conv3d_backward, conv3d_forward, Conv3dParams};
use crate::layers::dense::{relu, relu_backward};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ResidualBlockParams {
    pub conv1: Conv3dParams,
    pub conv2: Conv3dParams,
}

impl ResidualBlockParams {
    pub fn new(conv1: Conv3dParams, conv2: Conv3dParams) -> Result<Self> {
        for (name, c) in [("conv1", &conv1), ("conv2", &conv2)] {
            if c.stride != 1 || 2 * c.padding + 1 != c.kernel() {
                return Err(Error::Config(format!(
                    "residual {name} must preserve spatial dims (stride 1, padding (k-1)/2)"
                )));
            }
            if c.c_in() != c.c_out() {
                return Err(Error::ShapeMismatch(format!(
                    "residual {name} must preserve channels, got {} -> {}",
                    c.c_in(),
                    c.c_out()
                )));
            }
        }
        if conv1.c_out() != conv2.c_in() {
            return Err(Error::ShapeMismatch(
                "residual conv channel counts differ".into(),
            ));
        }
        Ok(ResidualBlockParams { conv1, conv2 })
    }

    pub fn init(channels: usize, k: usize, seed1: u64, seed2: u64) -> Result<Self> {
        let pad = (k - 1) / 2;
        ResidualBlockParams::new(
            Conv3dParams::init(channels, channels, k, 1, pad, seed1)?,
            Conv3dParams::init(channels, channels, k, 1, pad, seed2)?,
        )
    }
}

/// Intermediates needed by the backward pass.
pub struct ResidualCache {
    /// relu(conv1(x))
    pub mid: Tensor,
    /// conv2(mid) + x, pre final relu
    pub pre_out: Tensor,
}

pub fn residual_block_forward_cached(
    input: &Tensor,
    params: &ResidualBlockParams,
) -> Result<(Tensor, ResidualCache)> {
    let mid = relu(&conv3d_forward(input, &params.conv1)?);
    let mut pre_out = conv3d_forward(&mid, &params.conv2)?;
    if pre_out.shape() != input.shape() {
        return Err(Error::ShapeMismatch(
            "residual branch changed tensor shape".into(),
        ));
    }
    for (o, &x) in pre_out.data_mut().iter_mut().zip(input.data()) {
        *o += x;
    }
    let out = relu(&pre_out);
    Ok((out, ResidualCache { mid, pre_out }))
}

pub fn residual_block_forward(input: &Tensor, params: &ResidualBlockParams) -> Result<Tensor> {
    Ok(residual_block_forward_cached(input, params)?.0)
}

pub struct ResidualGrads {
    pub input: Tensor,
    pub conv1_weights: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weights: Tensor,
    pub conv2_bias: Tensor,
}

pub fn residual_block_backward(
    input: &Tensor,
    params: &ResidualBlockParams,
    cache: &ResidualCache,
    grad_out: &Tensor,
) -> Result<ResidualGrads> {
    // relu mask from pre_out sign (pre_out > 0 iff output > 0).
    let mut d_pre = grad_out.clone();
    for (g, &v) in d_pre.data_mut().iter_mut().zip(cache.pre_out.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    let g2 = conv3d_backward(&cache.mid, &params.conv2, &d_pre)?;
    let d_mid = relu_backward(&cache.mid, &g2.input)?;
    let g1 = conv3d_backward(input, &params.conv1, &d_mid)?;
    let mut grad_input = g1.input;
    // Shortcut path adds d_pre directly.
    for (g, &d) in grad_input.data_mut().iter_mut().zip(d_pre.data()) {
        *g += d;
    }
    Ok(ResidualGrads {
        input: grad_input,
        conv1_weights: g1.weights,
        conv1_bias: g1.bias,
        conv2_weights: g2.weights,
        conv2_bias: g2.bias,
    })
}
