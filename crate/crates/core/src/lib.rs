//! Entropy-gated early-exit CNNs, converting autoencoders that map hard
//! images to easy ones, and latency/energy accounting for edge inference.

pub mod bench;
pub mod converter;
pub mod data;
pub mod early_exit;
pub mod energy;
pub mod error;
pub mod models;
pub mod nn;
pub mod parallel;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Scalar, Tensor};
