//! Toy-scale laboratory for aligning a multilingual text encoder across
//! languages by contrastive training against images of a synthetic shapes
//! world. Everything runs on the CPU with a small reverse-mode autodiff core,
//! generic over `f32`/`f64`; the aliases below fix the scalar type.
//!
//! Stages: [`corpus`] builds scenes, captions in seven toy languages and NLI
//! pairs; [`encoders`] holds the transformers and masked-LM pretraining;
//! [`align`] trains the dual encoder; [`eval`] measures bitext retrieval, NLI
//! transfer and t-SNE structure; [`pipeline`] ties them to files and the CLI.

pub mod align;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

/// Scalar used by the experiment pipeline.
pub type Real = f32;

pub type AlignmentCheckpoint32 = align::AlignmentCheckpoint<f32>;
pub type AlignmentCheckpoint64 = align::AlignmentCheckpoint<f64>;
pub type TextModel32 = encoders::TextModel<f32>;
pub type TextModel64 = encoders::TextModel<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
