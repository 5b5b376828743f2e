//! Probability distributions over discretized HSV color space, estimated from
//! natural-language color descriptions. Two estimators share one evaluation
//! interface: a per-description histogram baseline and a compositional
//! recurrent model ("cdest") that composes distributions token by token.

pub mod baseline;
pub mod cdest;
pub mod checkpoint;
pub mod corpus;
pub mod discretize;
pub mod error;
pub mod evaluate;

pub use error::{Error, Result};
