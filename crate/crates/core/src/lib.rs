//! Continual-learning laboratory built around complementary prompts.
//!
//! A small ViT-style backbone is pretrained, frozen, and then steered through
//! a sequence of classification tasks by two kinds of learnable prompts: a
//! shared general prompt attached to shallow attention layers and per-task
//! expert prompts (each with a matching key) attached to deeper ones. The
//! crate ships the tensor/autodiff core, the backbone, the prompting
//! machinery, the class-incremental training engine, evaluation metrics,
//! synthetic benchmarks, and the experiment drivers behind the CLI.
//!
//! The numeric layer is generic over [`scalar::Scalar`] (`f32`/`f64`); the
//! crate-root aliases pin the model stack to `f64`, which the gradient
//! checks, checkpoints, and deterministic artifacts rely on.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod optim;
pub mod prompt;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};

/// Default-precision tensor used by the whole model stack.
pub type Tensor = tensor::Tensor<f64>;
/// Default-precision operation tape.
pub type Tape = tensor::Tape<f64>;
/// Single-precision variants, for callers that trade accuracy for memory.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tensor::Tape<f32>;
