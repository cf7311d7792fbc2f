//! Residual bottleneck adapters trained on cached hidden states of a frozen
//! decoder, with margin scoring, exact split statistics, a steering baseline
//! and adapter-aware greedy decoding.

mod binio;
pub mod adapters;
pub mod error;
pub mod evaluator;
pub mod factset;
pub mod generation;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod paperdata;
pub mod steering;
pub mod trainer;

pub use error::{Error, Result};
