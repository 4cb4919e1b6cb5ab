//! AbsoluteNet: a dual-stream spatio-temporal CNN with symmetric activations
//! for single-trial fNIRS classification, built on a small reverse-mode
//! autodiff engine.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod ga;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, Padding, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
