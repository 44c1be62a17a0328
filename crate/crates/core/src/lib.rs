//! Accent-invariant adversarial pre-training with an attention-based
//! sequence-to-sequence recognizer on top.

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod decode_eval;
pub mod error;
pub mod losses;
pub mod model;
pub mod params;
pub mod recipe;
pub mod report;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
