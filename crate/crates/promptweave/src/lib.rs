//! Multimodal sequence regression with prompt-based recovery of missing
//! modalities.
//!
//! The crate is organised in layers:
//!
//! * [`numerics`]: dense tensors, a counter-based RNG, a tape-based reverse-mode
//!   autodiff engine, and finite-difference gradient checking. Everything is
//!   generic over the scalar type; training runs in `f32`, gradient checking
//!   in `f64`.
//! * [`backbone`]: a crossmodal transformer over three input streams (audio,
//!   video, text) with per-modality temporal convolutions, directional
//!   cross-attention, and a fused regression head.
//! * [`prompts`]: the prompt bank and the generative module that reconstructs
//!   features for missing modalities, plus the prompt attachment rules.
//! * [`data`]: synthetic benchmark generation, missingness masks, and a
//!   line-delimited JSON dataset format.
//! * [`training`]: Adam, the two-stage pretrain / prompt-tune pipeline, and
//!   the baseline variants used for comparison.
//! * [`eval`]: metrics, per-mask evaluation reports, and sweep drivers with
//!   CSV output.
//! * [`checkpoint`]: a bit-exact binary container for model parameters.
//! * [`cli`]: the command-line front end.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod eval;
pub mod numerics;
pub mod prompts;
pub mod training;

pub use numerics::scalar::Scalar;
pub use numerics::tensor::Tensor;

/// Tensor specialisation used by the training and evaluation pipeline.
pub type Tensor32 = Tensor<f32>;
/// Tensor specialisation used by gradient checking.
pub type Tensor64 = Tensor<f64>;
