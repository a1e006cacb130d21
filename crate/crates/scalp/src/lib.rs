//! Joint contrastive/classification training for multi-label chest X-ray
//! studies, driven by patient metadata, with CAM-based lesion localization.
//!
//! The crate is self-contained: a small float64 tensor library with
//! reverse-mode differentiation, a configurable conv encoder with
//! cross-dimension attention, patient-aware batch sampling, the combined
//! loss, an SGD training loop, Grad-CAM/Grad-CAM++ heatmaps, and a
//! dynamic-programming bounding-box generator, plus the evaluation and
//! experiment harnesses that exercise them. Everything is verifiable on
//! synthetic data: gradients against finite differences, the box generator
//! against brute-force oracles.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var, VarGrads};
pub use error::{Error, Result};
pub use gradcheck::grad_check;
pub use tensor::Tensor;
