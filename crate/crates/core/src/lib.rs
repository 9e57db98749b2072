//! Listwise passage reranking where each candidate passage is presented to a
//! small language model as a single embedding token.

pub mod checkpoint;
pub mod cli;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod lm;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod projector;
pub mod retrieval;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
