pub mod behavior;
pub mod coldstart;
pub mod content;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod graph;
pub mod judge;
mod init;
pub mod model;
pub mod synth;
pub mod trainer;

pub use embedding::{EmbeddingTable, TaskPairEmbedding};
pub use error::{Error, Result};
