//! Entity-memory language models, their training and sampling, and the
//! entity coherence and consistency metric suite.

pub mod corpus;
pub mod error;
pub mod experiment;
pub mod generate;
pub mod metrics;
pub mod model;
pub mod par;
pub mod train;

pub use error::{Error, Result};
