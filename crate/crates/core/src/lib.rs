//! Probing how much absolute position information convolutional features carry.

pub mod data;
pub mod encoders;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod patterns;
pub mod probe;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use patterns::{generate, PatternKind, PositionMap};
pub use tensor::Tensor;
