//! Probing adapter that fuses multi-layer feature maps from several frozen
//! backbones into per-position tokens and classifies them with a small
//! transformer.

pub mod adapter;
pub mod baselines;
pub mod error;
pub mod features;
pub mod synthgen;
pub mod tensor;
#[cfg(any(test, feature = "testing"))]
pub mod testing;
pub mod training;

pub use error::{ComboError, Result};
pub use tensor::{layer_norm, GradStore, ParamStore, Parameter, Precision, Scalar, Tape, Tensor, Var};
