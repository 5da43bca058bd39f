//! Sharpness-aware training over a small reverse-mode autodiff core: plain
//! SGD, SAM, and the trajectory-loss optimizers SAF and MESA, plus sharpness
//! probes, loss-landscape grids and an experiment harness.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod landscape;
pub mod mesa;
pub mod nn;
pub mod numfmt;
pub mod objective;
pub mod optim;
pub mod saf;
pub mod sam;

pub use error::{Error, Result};
