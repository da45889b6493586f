//! Core numerics for a two-stage low-light image enhancement pipeline:
//! a tensor autodiff engine, RGB/HSV color surgery, U-Net building blocks
//! with squeeze-and-excitation channel attention, the stage losses and the
//! full-reference quality metric suite.

pub mod autodiff;
pub mod color;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
