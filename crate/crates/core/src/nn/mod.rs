//! Differentiable layers.

pub mod activation;
pub mod conv;
pub mod norm;
pub mod pool;
pub mod rearrange;
pub mod resize;

pub use activation::{prelu, sigmoid, PRELU_INIT};
pub use conv::{conv2d, depthwise_conv2d, ConvSpec};
pub use norm::{batchnorm2d, BatchNormConfig, NormMode, RunningStats};
pub use pool::{global_avg_pool, pool2d, PoolKind, PoolSpec};
pub use rearrange::{concat_channels, pixel_shuffle, pixel_unshuffle};
pub use resize::{resize, ResizeMode};
