//! Querying-transformer vision-language pipeline over a synthetic pathology
//! corpus: representation learning, report generation and retrieval evaluation.

#![forbid(unsafe_code)]

pub mod container;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod params;
pub mod qformer;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
