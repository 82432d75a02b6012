//! Multi-prompt, semantic-guided context optimization on a frozen toy dual
//! encoder.
//!
//! A bank of `N` learnable context matrices is prepended to class-name tokens,
//! encoded by a frozen text encoder and scored against image embeddings by
//! averaging cosine similarities over the prompts. Training minimizes
//! cross-entropy plus a semantic-guidance term that pulls the mean prompt
//! embedding towards description embeddings and a diversity term that
//! penalizes squared cosine similarity between prompts of the same class.

pub mod cli;
pub mod descriptions;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numeric;
pub mod objective;
mod parallel;
pub mod prompt;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
