//! Volumetric layer zoo: every layer has a deterministic forward and an
//! explicit backward checked against central differences.

mod conv3d;
mod dense;
mod pool;
mod residual;

pub use conv3d::{
    conv3d_backward, conv3d_forward, conv3d_output_shape, Conv3dGrads, Conv3dParams,
};
pub use dense::{
    linear_backward, linear_forward, relu, relu_backward, relu_inplace, sigmoid, sigmoid_backward,
    sigmoid_scalar, softmax, softmax_backward, LinearGrads,
};
pub use pool::{maxpool3d_backward, maxpool3d_forward};
pub use residual::{
    residual_block_backward, residual_block_forward, residual_block_forward_cached,
    ResidualBlockParams, ResidualCache, ResidualGrads,
};
