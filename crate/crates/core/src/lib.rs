pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod encoder;
pub mod evaluator;
pub mod fixtures;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod ingestion;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod parser;
pub mod pipeline;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{DamError, ErrorCategory, Result};
