//! Single-cell signaling-graph toolkit: sharded expression storage,
//! stratified cohort retrieval, masked-edge graph pretraining and
//! interpretable core-subgraph inference.

pub mod error;
pub mod matrix;
pub mod npy;
pub mod shard_store;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub mod checkpoint;
pub mod fm_model;
pub mod graph;
pub mod inference;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod retrieval;
pub mod rng;
pub mod stats;
pub mod synthetic;
