//! Desk-scale neural machine translation workbench focused on decoder
//! efficiency: lightweight recurrent decoder layers, feed-forward
//! removal, deep-encoder/shallow-decoder depth trades, and attention
//! head pruning via stochastic gates, with a words-per-second benchmark
//! harness to compare them.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod decode;
pub mod error;
pub mod graph;
pub mod model;
pub mod pruning;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
