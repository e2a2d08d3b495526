//! Residual-stream gating for token-wise layer skipping in decoder-only
//! transformers.
//!
//! Every attention and MLP branch is scaled by a sigmoid gate computed from
//! the residual stream. The mean gate value of a token ranks it against the
//! other tokens of the sequence, and the lowest-ranked tokens bypass the
//! branch entirely under a compute budget.

pub mod accounting;
pub mod analysis;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod model;
pub mod numerics;
pub mod skipping;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
