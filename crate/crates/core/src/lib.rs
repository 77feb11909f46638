//! Temporal knowledge-graph question answering: KG embeddings with a
//! time-order auxiliary task, retrieval-calibrated question encoding,
//! attention-diffusion reasoning over query subgraphs, and a joint
//! entity/timestamp answer head.

pub mod answer;
pub mod calibration;
pub mod checkpoint;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod explain;
pub mod generate;
pub mod gnn;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod questions;
pub mod report;
pub mod store;

pub use error::{Error, Result};
