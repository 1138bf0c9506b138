//! From-scratch training engine and data pipeline for binary
//! visual-aesthetics classification.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`] / [`ops`] — dense tensors and the exact forward/backward
//!   kernels the architecture needs, generic over [`Scalar`] (f32 for
//!   training, f64 for gradient checking);
//! - [`colorspace`] / [`imageio`] — sRGB -> CIELAB conversion and the image
//!   input pipeline;
//! - [`dataset`] — AVA vote parsing, mean scores, the AVA2 top/bottom-10%
//!   split with percentile extension, manifest files;
//! - [`net`] — the three-dense-block classifier with per-level skip
//!   connections into a decision module;
//! - [`coherence`] — embeddings, exact nearest neighbors, and coherent
//!   minibatch plans that pack similar images of both classes together;
//! - [`trainer`] / [`evaluator`] / [`checkpoint`] — the SGD-with-momentum
//!   loop, accuracy reporting, and bit-exact parameter persistence;
//! - [`gradcheck`] — finite-difference verification of every backward pass.

pub mod checkpoint;
pub mod coherence;
pub mod colorspace;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod imageio;
pub mod net;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor, the storage type of the network.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used by the gradient-checking path.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Net32 = net::AestheticNet<f32>;
pub type Net64 = net::AestheticNet<f64>;
