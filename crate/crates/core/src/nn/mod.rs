//! Neural network building blocks on top of the gradient tape.

mod attention;
mod layers;
mod params;

pub use attention::{mhsa, mlp, transformer_block, NormPlacement};
pub use layers::{
    adaptive_avg_pool, adaptive_avg_pool_forward, bilinear_resize, bilinear_resize_forward, conv2d,
    conv2d_forward, gelu, gelu_forward, gelu_scalar, layer_norm, layer_norm_forward, linear,
    linear_forward, pool_bin, resize_taps,
};
pub use params::{
    bind, bind_constant, is_weight, named_leaves, Conv2dParams, Initializer, LayerNormParams,
    LinearParams, MhsaParams, ParamMap, TransformerBlockParams, LAYER_NORM_EPS,
};

pub(crate) use params::join;
