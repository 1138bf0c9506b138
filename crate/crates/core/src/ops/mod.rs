//! Forward and backward kernels for the layer set the architecture needs.
//!
//! Every kernel is a pure function: inputs are borrowed immutably and results
//! (including updated running statistics) are returned by value. Reverse-mode
//! gradients are exact; `crate::gradcheck` verifies each one against central
//! finite differences in double precision.

mod activation;
mod concat;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;

pub use activation::{relu, relu_backward};
pub use concat::{concat_channels, concat_channels_backward};
pub use conv::{conv2d_backward, conv2d_forward, Conv2dGrads};
pub use linear::{fully_connected, fully_connected_backward, LinearGrads};
pub use loss::{
    softmax_cross_entropy, softmax_cross_entropy_backward, softmax_rows, SceCache,
};
pub use norm::{
    batchnorm2d_backward, batchnorm2d_forward, BnCache, BnForward, BnGrads,
};
pub use pool::{
    avgpool2d, avgpool2d_backward, global_avgpool, global_avgpool_backward,
};

/// Whether a forward pass uses batch statistics (train) or running
/// statistics (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
