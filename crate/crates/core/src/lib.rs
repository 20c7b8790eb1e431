//! Self-contained multi-scale graph contrastive learning engine.
//!
//! The pipeline runs PPR diffusion over an input graph, samples paired
//! subgraph views (original vs diffused), trains a shared 1-layer GCN encoder
//! with node-, neighborhood- and subgraph-level contrastive losses on a
//! built-in reverse-mode tape, and evaluates the frozen embeddings with a
//! linear probe and k-means clustering. No external ML framework is involved.

pub mod autograd;
pub mod config;
pub mod dense;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod sampling;
pub mod sparse;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
