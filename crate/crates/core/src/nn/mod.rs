//! Numeric kernels. Every function here is pure; the differentiable ones come
//! with an explicit backward counterpart that [`crate::tape::Tape`] chains.

pub mod activation;
pub mod conv;
pub mod loss;
pub mod matmul;
pub mod norm;
pub mod pool;
pub mod resample;
pub mod softmax;

pub use activation::{activation, Activation};
pub use conv::{conv1d_channel, conv2d, ConvSpec};
pub use loss::bce;
pub use matmul::batched_matmul;
pub use norm::{normalize, NormKind, RunningStats};
pub use pool::{pool, PoolKind};
pub use resample::resample_bilinear;
pub use softmax::softmax_lastdim;
