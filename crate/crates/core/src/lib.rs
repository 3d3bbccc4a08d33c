//! Vulnerability detection for raw EVM bytecode.
//!
//! The pipeline recovers a control-flow graph from bytecode, scores its
//! nodes against abstract vulnerability patterns, and trains a two-stage
//! student network (Bi-LSTM over blocks, then GAT + MLP over the graph)
//! whose graph feature is additionally pulled towards features distilled
//! from source-code teacher vectors.

pub mod avp;
pub mod cfg;
pub mod disasm;
pub mod distill;
pub mod embed;
pub mod error;
pub mod harness;
pub mod params;
pub mod student;

mod codec;

pub use error::{Error, Result};
