//! Planner for 3D-parallel (pipeline/tensor/data) LLM training
//! configurations on heterogeneous real-world clusters.
//!
//! The pipeline: ingest or synthesize a pairwise bandwidth matrix
//! ([`topology`]), enumerate parallelization candidates and microbatch
//! splits ([`search`]), reject configurations the memory estimator flags as
//! OOM ([`memest`]), and refine each survivor's worker-to-GPU mapping by
//! simulated annealing ([`mapsearch`]) under a critical-path latency model
//! ([`latency`]). A discrete-event pipeline schedule simulator
//! ([`schedsim`]) serves as the desk-scale oracle for the closed forms.

pub mod error;
pub mod latency;
pub mod mapsearch;
pub mod memest;
pub mod model;
pub mod schedsim;
pub mod search;
pub mod topology;

pub use error::{Error, Result};
pub use model::{ClusterSpec, ModelSpec, ParallelConfig};
pub use search::{search, SearchOptions, SearchResult};
