//! Knowledge-fused punchline generation: corpus preparation, knowledge
//! retrieval, graph encoding, the fused encoder-decoder, training, decoding
//! and ROUGE evaluation.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod graph_encoder;
pub mod kgraph;
pub mod knowledge;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod selftest;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
