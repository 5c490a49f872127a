//! Unsupervised domain adaptation for anatomical landmark detection.

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
