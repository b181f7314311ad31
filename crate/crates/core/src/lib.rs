//! Pixelwise consistency training for unsupervised domain adaptation of
//! semantic segmentation, at a scale that fits on one laptop core.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod perturb;
pub mod segnet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ElementwiseKind, Tape, Tensor, Var};
