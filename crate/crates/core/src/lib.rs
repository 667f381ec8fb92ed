//! IR-drop estimation toolkit: synthetic power grids with an exact nodal
//! solver, the proximity-graph formulation over nets, GNN surrogates
//! (GCN/GAT/GIN) trained on a small reverse-mode tensor library, and
//! gradient-boosted-tree and convolutional baselines.

pub mod baselines;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod matrix;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod solver;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
