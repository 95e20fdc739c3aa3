//! Multilingual sentence embeddings trained with a reconstruction objective
//! and an in-batch contrastive objective, plus the tooling to evaluate them.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod evalkit;
pub mod gradcheck;
pub mod error;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{EmsError, Result};
