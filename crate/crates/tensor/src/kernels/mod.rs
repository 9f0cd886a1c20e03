//! Graph-free forward and backward kernels.
//!
//! Each kernel is a pure function of its inputs. The [`Graph`](crate::Graph)
//! records which ones ran and calls the matching gradient kernels.

mod conv;
mod dense;
mod elementwise;
pub mod gemm;
mod norm;
mod pool;
mod spatial;

pub use conv::{
    channel_sums, conv2d, conv2d_input_grad, conv2d_weight_grad, conv_out_extent, conv_transpose2d,
    conv_transpose2d_input_grad, conv_transpose2d_weight_grad, conv_transpose_out_extent,
};
pub use dense::{linear, linear_grad};
pub use elementwise::{activation, activation_grad, add, mse, mse_grad, same_shape, scale, Activation};
pub use norm::{batch_norm_eval, batch_norm_eval_grad, batch_norm_train, batch_norm_train_grad, BatchNormTrain};
pub use pool::{adaptive_avg_pool, adaptive_avg_pool_grad, adaptive_window, max_pool2d, max_pool2d_grad};
pub use spatial::{concat_channels, resize_bilinear, resize_bilinear_grad, split_channels, tile_2x2, untile_2x2};
