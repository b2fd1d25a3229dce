//! Knowledge-enhanced multi-label image classification at desk scale.
//!
//! A text encoder is trained contrastively on concept names and
//! definitions, then frozen. Its embeddings of class names become the
//! queries of a transformer decoder that attends over convolutional image
//! tokens, optionally after passing through a bank of learnable prompts.
//! Training handles partially labeled data, and classes never seen in
//! training can be scored from their names alone.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod knowledge;
pub mod model;
pub mod nn;
pub mod optim;
pub mod prompt;
pub mod query_head;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod visual;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Classifier32 = model::Classifier<f32>;
pub type Classifier64 = model::Classifier<f64>;
pub type ToyTextEncoder32 = knowledge::ToyTextEncoder<f32>;
pub type ToyTextEncoder64 = knowledge::ToyTextEncoder<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
