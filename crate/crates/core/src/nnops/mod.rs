//! Operator kernels: sliding-window unfolding, pooling, convolution,
//! involution, windowed self-attention, batch normalisation and activations.
//!
//! Every function here is pure. Gradient kernels live next to their forward
//! counterparts and are driven by [`crate::autodiff::Tape`].

mod activation;
mod attention;
mod conv;
mod involution;
mod norm;
mod pool;
mod unfold;

pub use activation::{
    cross_entropy, cross_entropy_backward, dense, dense_backward, linear_1x1, linear_1x1_backward,
    relu, relu_backward, softmax, softmax_backward,
};
pub use attention::{
    content_affinity, content_affinity_backward, local_self_attention, position_affinity,
    position_affinity_backward, AttentionMode, AttentionSpec,
};
pub use conv::{conv2d, conv2d_backward, conv2d_raw, depthwise_conv2d, ConvSpec};
pub use involution::{
    involution, involution_mac, involution_mac_backward, involution_mac_unfolded, kernel_generate,
    InvolutionSpec, KernelGenForm, ReduceStage,
};
pub use norm::{
    batch_norm, batch_norm_apply, batch_norm_backward, channel_stats, norm_forward, BatchNormState,
    BnMode,
};
pub use pool::{
    avg_pool2d, avg_pool2d_backward, global_avg_pool, global_avg_pool_backward, max_pool2d,
    max_pool2d_backward,
};
pub use unfold::{fold, out_size, same_padding, unfold, Window};
