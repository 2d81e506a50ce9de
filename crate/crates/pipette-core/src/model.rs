//! Shared domain types: the model being trained, the physical cluster, and
//! one candidate parallelization configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_bytes_per_element() -> u64 {
    2
}

/// Transformer model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: u64,
    pub n_hidden: u64,
    pub n_heads: u64,
    pub seq_len: u64,
    pub vocab_size: u64,
    /// Bytes per activation/weight element (2 for half precision).
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_element: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_hidden", self.n_hidden),
            ("n_heads", self.n_heads),
            ("seq_len", self.seq_len),
            ("vocab_size", self.vocab_size),
            ("bytes_per_element", self.bytes_per_element),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if !self.n_hidden.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "n_hidden ({}) must be divisible by n_heads ({})",
                self.n_hidden, self.n_heads
            )));
        }
        Ok(())
    }

    /// Approximate transformer parameter count:
    /// `12 * n_layers * n_hidden^2 + vocab_size * n_hidden`.
    pub fn n_params(&self) -> u64 {
        12 * self.n_layers * self.n_hidden * self.n_hidden + self.vocab_size * self.n_hidden
    }
}

/// Physical cluster description. GPU indices are node-major: GPU `g`
/// belongs to node `g / gpus_per_node`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub n_nodes: u64,
    pub gpus_per_node: u64,
    /// Per-GPU memory limit in MiB.
    pub mem_limit_per_gpu: f64,
    /// Name of the bandwidth matrix this cluster refers to.
    #[serde(default)]
    pub topology_id: String,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 1 || self.gpus_per_node < 1 {
            return Err(Error::invalid("n_nodes and gpus_per_node must be >= 1"));
        }
        if self.mem_limit_per_gpu.is_nan() || self.mem_limit_per_gpu <= 0.0 {
            return Err(Error::invalid("mem_limit_per_gpu must be > 0"));
        }
        Ok(())
    }

    /// Total number of GPUs.
    pub fn n_gpus(&self) -> u64 {
        self.n_nodes * self.gpus_per_node
    }

    pub fn node_of(&self, gpu: usize) -> usize {
        gpu / self.gpus_per_node as usize
    }
}

/// One candidate 3D-parallel configuration together with its batch split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub pp: u64,
    pub tp: u64,
    pub dp: u64,
    pub bs_global: u64,
    pub bs_mini: u64,
    pub bs_micro: u64,
    pub n_mb: u64,
}

impl ParallelConfig {
    /// Builds a configuration, deriving `bs_mini` and `n_mb` and checking
    /// all divisibility constraints.
    pub fn new(
        pp: u64,
        tp: u64,
        dp: u64,
        bs_global: u64,
        bs_micro: u64,
        cluster: &ClusterSpec,
    ) -> Result<Self> {
        if pp < 1 || tp < 1 || dp < 1 {
            return Err(Error::invalid("pp, tp, dp must be >= 1"));
        }
        if pp * tp * dp != cluster.n_gpus() {
            return Err(Error::invalid(format!(
                "pp*tp*dp = {} does not match GPU count {}",
                pp * tp * dp,
                cluster.n_gpus()
            )));
        }
        if !cluster.gpus_per_node.is_multiple_of(tp) {
            return Err(Error::invalid(format!(
                "tp ({tp}) must divide gpus_per_node ({})",
                cluster.gpus_per_node
            )));
        }
        if bs_global == 0 || !bs_global.is_multiple_of(dp) {
            return Err(Error::invalid(format!(
                "dp ({dp}) must divide bs_global ({bs_global})"
            )));
        }
        let bs_mini = bs_global / dp;
        if bs_micro == 0 || !bs_mini.is_multiple_of(bs_micro) {
            return Err(Error::invalid(format!(
                "bs_micro ({bs_micro}) must divide bs_mini ({bs_mini})"
            )));
        }
        Ok(ParallelConfig {
            pp,
            tp,
            dp,
            bs_global,
            bs_mini,
            bs_micro,
            n_mb: bs_mini / bs_micro,
        })
    }

    pub fn n_workers(&self) -> usize {
        (self.pp * self.tp * self.dp) as usize
    }
}
