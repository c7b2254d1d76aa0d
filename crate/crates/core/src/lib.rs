//! Residual KV-cache compression for small decoder-only transformers, with a
//! tiered cache manager and a sparse-attention controller.
//!
//! Every cached token is stored as the difference between its KV state and
//! the mean of its nearest strided reference tokens, compressed by a small
//! learned codec. Filter layers score tokens; sparse layers reconstruct only
//! the tokens they select.

pub mod analysis;
pub mod cache;
pub mod cli;
pub mod codec;
pub mod container;
pub mod controller;
pub mod corpus;
pub mod error;
pub mod model;
pub mod quant;
pub mod reference;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
