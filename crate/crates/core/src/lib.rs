//! Diabetic-retinopathy grading on a from-scratch EfficientNet-B0.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod scaling;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
