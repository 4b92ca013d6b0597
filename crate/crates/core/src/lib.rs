//! Nested mixture-of-experts neural operator for autoregressive PDE
//! prediction, built on a small in-crate tensor and reverse-mode
//! differentiation engine.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoding;
pub mod error;
pub mod experts;
pub mod losses;
pub mod model;
pub mod routing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
