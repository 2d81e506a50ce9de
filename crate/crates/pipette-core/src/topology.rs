//! Measured pairwise inter-node bandwidths plus per-node intra-node
//! bandwidth, and seeded synthetic topologies for testing.
//!
//! CSV format (bit-exact): `n_nodes` rows of `n_nodes` comma-separated
//! inter-node bandwidths in GB/s, followed by one row of `n_nodes`
//! intra-node bandwidths. Diagonal entries are unused and are set equal
//! to the node's intra-node bandwidth.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClusterSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthMatrix {
    pub n_nodes: usize,
    /// Directional inter-node bandwidth in GB/s, row-major (`inter[src][dst]`).
    pub inter: Vec<Vec<f64>>,
    /// Intra-node (e.g. NVLink) bandwidth per node, GB/s.
    pub intra: Vec<f64>,
}

impl BandwidthMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::invalid("bandwidth matrix must have >= 1 node"));
        }
        if self.inter.len() != self.n_nodes || self.intra.len() != self.n_nodes {
            return Err(Error::invalid("bandwidth matrix dimensions inconsistent"));
        }
        for (i, row) in self.inter.iter().enumerate() {
            if row.len() != self.n_nodes {
                return Err(Error::invalid(format!("inter row {i} has wrong length")));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v <= 0.0 {
                    return Err(Error::invalid(format!(
                        "inter[{i}][{j}] must be finite and > 0, got {v}"
                    )));
                }
            }
        }
        for (i, &v) in self.intra.iter().enumerate() {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!(
                    "intra[{i}] must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Largest entry of the matrix (inter and intra), used as the nominal
    /// bandwidth of the prior-art latency model.
    pub fn max_bandwidth(&self) -> f64 {
        let inter_max = self
            .inter
            .iter()
            .enumerate()
            .flat_map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .filter(move |(j, _)| *j != i)
                    .map(|(_, &v)| v)
            })
            .fold(f64::MIN, f64::max);
        self.intra.iter().copied().fold(inter_max, f64::max)
    }

    /// Pairwise bandwidth between two GPUs in GB/s: intra-node bandwidth
    /// when they share a node, the directional inter-node entry otherwise.
    pub fn gpu_pair(&self, cluster: &ClusterSpec, g1: usize, g2: usize) -> f64 {
        let a = cluster.node_of(g1);
        let b = cluster.node_of(g2);
        if a == b {
            self.intra[a]
        } else {
            self.inter[a][b]
        }
    }

    /// Serializes to the CSV matrix format. `parse_matrix` inverts this.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.inter {
            let cells: Vec<String> = row.iter().map(|v| format_bw(*v)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        let cells: Vec<String> = self.intra.iter().map(|v| format_bw(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
        out
    }
}

fn format_bw(v: f64) -> String {
    // Shortest representation that round-trips through f64.
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') {
        s.push_str(".0");
    }
    s
}

/// Parses the CSV matrix format: `n_nodes` inter rows + 1 intra row.
pub fn parse_matrix(text: &str, n_nodes: usize) -> Result<BandwidthMatrix> {
    if n_nodes == 0 {
        return Err(Error::invalid("n_nodes must be >= 1"));
    }
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != n_nodes + 1 {
        return Err(Error::invalid(format!(
            "expected {} rows ({} inter + 1 intra), got {}",
            n_nodes + 1,
            n_nodes,
            rows.len()
        )));
    }
    let parse_row = |row_idx: usize, line: &str| -> Result<Vec<f64>> {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n_nodes {
            return Err(Error::Parse {
                row: row_idx,
                col: cells.len(),
                msg: format!("expected {n_nodes} columns, got {}", cells.len()),
            });
        }
        cells
            .iter()
            .enumerate()
            .map(|(col, cell)| {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    row: row_idx,
                    col,
                    msg: format!("not a number: {cell:?}"),
                })?;
                if !v.is_finite() || v <= 0.0 {
                    return Err(Error::Parse {
                        row: row_idx,
                        col,
                        msg: format!("bandwidth must be finite and > 0, got {v}"),
                    });
                }
                Ok(v)
            })
            .collect()
    };
    let mut inter = Vec::with_capacity(n_nodes);
    for (i, line) in rows[..n_nodes].iter().enumerate() {
        inter.push(parse_row(i, line)?);
    }
    let intra = parse_row(n_nodes, rows[n_nodes])?;
    let mut m = BandwidthMatrix {
        n_nodes,
        inter,
        intra,
    };
    // Diagonal entries are unused; pin them to the intra bandwidth.
    for i in 0..n_nodes {
        m.inter[i][i] = m.intra[i];
    }
    m.validate()?;
    Ok(m)
}

/// Generates a two-level heterogeneous topology: a seeded random subset of
/// directed node pairs gets `slow_bw`, the rest `fast_bw`.
pub fn synth_topology(
    n_nodes: usize,
    fast_bw: f64,
    slow_bw: f64,
    slow_fraction: f64,
    intra_bw: f64,
    seed: u64,
) -> Result<BandwidthMatrix> {
    if n_nodes == 0 {
        return Err(Error::invalid("n_nodes must be >= 1"));
    }
    if !(slow_bw > 0.0 && fast_bw >= slow_bw) {
        return Err(Error::invalid("need fast_bw >= slow_bw > 0"));
    }
    if intra_bw.is_nan() || intra_bw <= 0.0 {
        return Err(Error::invalid("intra_bw must be > 0"));
    }
    if !(0.0..=1.0).contains(&slow_fraction) {
        return Err(Error::invalid("slow_fraction must be in [0, 1]"));
    }
    let mut pairs: Vec<(usize, usize)> = (0..n_nodes)
        .flat_map(|i| (0..n_nodes).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let n_slow = (slow_fraction * pairs.len() as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let mut m = BandwidthMatrix {
        n_nodes,
        inter: vec![vec![fast_bw; n_nodes]; n_nodes],
        intra: vec![intra_bw; n_nodes],
    };
    for &(i, j) in pairs.iter().take(n_slow) {
        m.inter[i][j] = slow_bw;
    }
    for i in 0..n_nodes {
        m.inter[i][i] = intra_bw;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_small_matrix() {
        let m = parse_matrix("10,8\n9,10\n300,300\n", 2).unwrap();
        assert_eq!(m.inter[0][1], 8.0);
        assert_eq!(m.inter[1][0], 9.0);
        assert_eq!(m.intra, vec![300.0, 300.0]);
        // diagonal pinned to intra
        assert_eq!(m.inter[0][0], 300.0);
    }

    #[test]
    fn rejects_zero_and_garbage() {
        assert!(parse_matrix("10,0\n9,10\n300,300\n", 2).is_err());
        let err = parse_matrix("10,abc\n9,10\n300,300\n", 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 0") && msg.contains("column 1"), "{msg}");
    }

    #[test]
    fn rejects_ragged_rows() {
        assert!(parse_matrix("10,8,1\n9,10\n300,300\n", 2).is_err());
        assert!(parse_matrix("10,8\n9,10\n", 2).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = synth_topology(4, 12.5, 6.25, 0.3, 300.0, 7).unwrap();
        let back = parse_matrix(&m.to_csv(), 4).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn synth_extremes_and_determinism() {
        let uniform = synth_topology(3, 10.0, 5.0, 0.0, 300.0, 1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(uniform.inter[i][j], 10.0);
                }
            }
        }
        let all_slow = synth_topology(3, 10.0, 5.0, 1.0, 300.0, 1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(all_slow.inter[i][j], 5.0);
                }
            }
        }
        let a = synth_topology(6, 10.0, 5.0, 0.4, 300.0, 42).unwrap();
        let b = synth_topology(6, 10.0, 5.0, 0.4, 300.0, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gpu_pair_lookup() {
        let cluster = ClusterSpec {
            n_nodes: 2,
            gpus_per_node: 2,
            mem_limit_per_gpu: 1.0,
            topology_id: String::new(),
        };
        let m = parse_matrix("10,8\n9,10\n300,200\n", 2).unwrap();
        assert_eq!(m.gpu_pair(&cluster, 0, 1), 300.0);
        assert_eq!(m.gpu_pair(&cluster, 2, 3), 200.0);
        assert_eq!(m.gpu_pair(&cluster, 0, 2), 8.0);
        assert_eq!(m.gpu_pair(&cluster, 3, 1), 9.0);
    }
}
