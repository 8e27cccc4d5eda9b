//! Spatio-temporal representation factorization (STRF) for video person
//! re-identification: the factorization unit, residual 3-D backbones that
//! host it, training objectives, retrieval evaluation and synthetic data.

pub mod ablate;
pub mod autodiff;
pub mod backbone;
pub mod checks;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod objectives;
pub mod reid;
pub mod strf;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
