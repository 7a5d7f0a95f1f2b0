//! Memory-efficient federated finetuning with forward-mode gradients.
//!
//! The crate simulates federated training in which every client estimates
//! gradients of a small subset of trainable layers with one dual-number
//! forward pass, alongside backpropagation and finite-difference baselines,
//! closed-form cost models, and Monte-Carlo checks of the estimator theory.

// `!(x > 0.0)` is how argument checks reject NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod fedcore;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod validation;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorMap};
