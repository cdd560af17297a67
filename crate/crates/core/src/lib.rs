pub mod budget;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod grpo;
pub mod interleave;
pub mod pipeline;
pub mod provider;
pub mod reward;
pub mod seed;
pub mod span;
pub mod synth;

pub use error::{Error, Result};
