//! Forward and backward implementations of the numeric building blocks:
//! dense layers and losses, normalizations, graph smoothing, and the 2-D
//! convolution stack.
//!
//! There is no general autodiff here. Each operation exposes a forward
//! function (returning whatever cache its backward needs) and a matching
//! backward function; the model modules chain them by hand.

pub mod conv;
pub mod dense;
pub mod graph;
pub mod norm;

pub use conv::{
    conv2d_add_single_input_channel, conv2d_backward, conv2d_forward, conv2d_single_channel,
    maxpool2x2_backward, maxpool2x2_forward, maxpool2x2_margin,
};
pub use dense::{
    bce_grad, bce_loss, linear_backward, linear_forward, relu_backward, relu_forward, sigmoid,
    sigmoid_grad,
};
pub use graph::{gcn_smooth_backward, gcn_smooth_forward};
pub use norm::{
    layer_norm_backward, layer_norm_forward, masked_softmax, masked_softmax_backward, LayerNormCache,
    LN_EPS,
};
