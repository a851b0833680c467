//! Dataset condensation into a generative model: a shared learnable codebook
//! and a class-conditioned generator trained by bi-level optimization, plus
//! the evaluation protocol and coreset baselines used to score the result.

pub mod checkpoint;
pub mod codebook;
pub mod condense;
pub mod coreset;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod preset;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
