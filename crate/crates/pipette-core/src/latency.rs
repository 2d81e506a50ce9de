//! Closed-form iteration latency models.
//!
//! The refined model splits one 1F1B iteration into a bubble term repeated
//! n_mb/pp times, a straggler term, and the stage-1 data-parallel all-reduce.
//! The prior-art model is kept for comparison reports; it misses the repeated
//! communication on the hidden critical path and uses a single nominal
//! bandwidth.
//!
//! Units: bandwidths in GB/s, message sizes in bytes, latencies in seconds;
//! `seconds = bytes / (GB/s * 1e9)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapsearch::WorkerMapping;
use crate::model::{ClusterSpec, ModelSpec, ParallelConfig};
use crate::topology::BandwidthMatrix;

/// Profiled per-layer compute and tensor-parallel communication latencies,
/// keyed by (tp, bs_micro). Missing keys are filled by log-linear
/// interpolation (in bs_micro and in 1/tp), clamped at the table boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeProfile {
    pub entries: Vec<ProfileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub tp: u64,
    pub bs_micro: u64,
    /// Combined forward+backward compute latency, seconds per layer.
    pub compute_per_layer: f64,
    /// Tensor-parallel all-reduce latency, seconds per layer.
    pub tp_comm_per_layer: f64,
}

impl ComputeProfile {
    /// A profile with a single entry; lookups then return that entry's
    /// values for every (tp, bs_micro). Convenient for analytic tests.
    pub fn uniform(compute_per_layer: f64, tp_comm_per_layer: f64) -> Self {
        ComputeProfile {
            entries: vec![ProfileEntry {
                tp: 1,
                bs_micro: 1,
                compute_per_layer,
                tp_comm_per_layer,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("compute profile is empty".into()));
        }
        for e in &self.entries {
            if e.tp < 1 || e.bs_micro < 1 {
                return Err(Error::invalid("profile keys must be >= 1"));
            }
            if e.compute_per_layer.is_nan()
                || e.compute_per_layer <= 0.0
                || e.tp_comm_per_layer < 0.0
            {
                return Err(Error::invalid(
                    "compute_per_layer must be > 0 and tp_comm_per_layer >= 0",
                ));
            }
        }
        Ok(())
    }

    /// Per-layer (compute, tp_comm) at the given key, interpolating or
    /// clamping as needed.
    pub fn lookup(&self, tp: u64, bs_micro: u64) -> Result<(f64, f64)> {
        self.validate()?;
        let mut tps: Vec<u64> = self.entries.iter().map(|e| e.tp).collect();
        tps.sort_unstable();
        tps.dedup();
        // coordinate for the tp axis is ln(1/tp) = -ln(tp)
        let (tp_lo, tp_hi) = bracket(&tps, tp);
        let lo = self.at_fixed_tp(tp_lo, bs_micro);
        if tp_lo == tp_hi {
            return Ok(lo);
        }
        let hi = self.at_fixed_tp(tp_hi, bs_micro);
        let u = -(tp as f64).ln();
        let u0 = -(tp_lo as f64).ln();
        let u1 = -(tp_hi as f64).ln();
        let frac = (u - u0) / (u1 - u0);
        Ok((log_lerp(lo.0, hi.0, frac), log_lerp(lo.1, hi.1, frac)))
    }

    fn at_fixed_tp(&self, tp: u64, bs_micro: u64) -> (f64, f64) {
        let mut keys: Vec<u64> = self
            .entries
            .iter()
            .filter(|e| e.tp == tp)
            .map(|e| e.bs_micro)
            .collect();
        keys.sort_unstable();
        keys.dedup();
        let (lo, hi) = bracket(&keys, bs_micro);
        let val = |bs: u64| -> (f64, f64) {
            let e = self
                .entries
                .iter()
                .find(|e| e.tp == tp && e.bs_micro == bs)
                .expect("bracketed key exists");
            (e.compute_per_layer, e.tp_comm_per_layer)
        };
        let v0 = val(lo);
        if lo == hi {
            return v0;
        }
        let v1 = val(hi);
        let frac =
            ((bs_micro as f64).ln() - (lo as f64).ln()) / ((hi as f64).ln() - (lo as f64).ln());
        (log_lerp(v0.0, v1.0, frac), log_lerp(v0.1, v1.1, frac))
    }
}

/// Nearest keys bracketing `q` in a sorted, deduped list; both ends clamp
/// to the boundary key.
fn bracket(keys: &[u64], q: u64) -> (u64, u64) {
    debug_assert!(!keys.is_empty());
    if q <= keys[0] {
        return (keys[0], keys[0]);
    }
    if q >= *keys.last().unwrap() {
        let k = *keys.last().unwrap();
        return (k, k);
    }
    match keys.binary_search(&q) {
        Ok(i) => (keys[i], keys[i]),
        Err(i) => (keys[i - 1], keys[i]),
    }
}

/// Geometric interpolation: linear in log(value). Falls back to linear
/// interpolation when an endpoint is zero (tp_comm at tp=1).
fn log_lerp(v0: f64, v1: f64, frac: f64) -> f64 {
    if v0 <= 0.0 || v1 <= 0.0 {
        v0 + (v1 - v0) * frac
    } else {
        (v0.ln() + (v1.ln() - v0.ln()) * frac).exp()
    }
}

/// Per-microbatch inter-stage activation payload and per-replica gradient
/// payload of a stage-1 shard, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MessageSizes {
    pub msg_pp: f64,
    pub msg_dp: f64,
}

pub fn message_sizes(model: &ModelSpec, conf: &ParallelConfig) -> MessageSizes {
    let msg_pp = (conf.bs_micro * model.seq_len * model.n_hidden * model.bytes_per_element) as f64;
    let msg_dp =
        model.n_params() as f64 / (conf.pp * conf.tp) as f64 * model.bytes_per_element as f64;
    MessageSizes { msg_pp, msg_dp }
}

/// Per-stage compute and tensor-parallel communication for the largest
/// pipeline stage: ceil(n_layers/pp) layers.
pub fn stage_compute(
    profile: &ComputeProfile,
    model: &ModelSpec,
    conf: &ParallelConfig,
) -> Result<(f64, f64)> {
    if model.n_layers < conf.pp {
        return Err(Error::Config(format!(
            "n_layers ({}) < pp ({})",
            model.n_layers, conf.pp
        )));
    }
    let layers_per_stage = model.n_layers.div_ceil(conf.pp) as f64;
    let (c_layer, tp_layer) = profile.lookup(conf.tp, conf.bs_micro)?;
    Ok((layers_per_stage * c_layer, layers_per_stage * tp_layer))
}

/// `T_bubble = pp*(C + T_TP) + (pp-1)*T_PP`
pub fn t_bubble(pp: u64, c: f64, t_tp: f64, t_pp: f64) -> f64 {
    pp as f64 * (c + t_tp) + (pp - 1) as f64 * t_pp
}

/// `T_straggler = (pp-1)*(C + T_TP)`
pub fn t_straggler(pp: u64, c: f64, t_tp: f64) -> f64 {
    (pp - 1) as f64 * (c + t_tp)
}

/// Slowest end-to-end pipeline: max over (y, z) of the summed per-hop
/// transfer times, message doubled for forward and backward passes.
pub fn t_pp_comm(
    mapping: &WorkerMapping,
    bw: &BandwidthMatrix,
    msg_pp: f64,
    conf: &ParallelConfig,
    cluster: &ClusterSpec,
) -> f64 {
    let mut worst: f64 = 0.0;
    for y in 0..conf.tp {
        for z in 0..conf.dp {
            let mut path = 0.0;
            for x in 0..conf.pp.saturating_sub(1) {
                let g1 = mapping.gpu(x, y, z);
                let g2 = mapping.gpu(x + 1, y, z);
                path += 2.0 * msg_pp / (bw.gpu_pair(cluster, g1, g2) * 1e9);
            }
            worst = worst.max(path);
        }
    }
    worst
}

/// Hierarchical-ring all-reduce cost of the stage-1 data-parallel groups:
/// two intra-node all-reduces plus one inter-node all-reduce, each bounded
/// by the slowest participating link.
pub fn t_dp_comm(
    mapping: &WorkerMapping,
    bw: &BandwidthMatrix,
    msg_dp: f64,
    conf: &ParallelConfig,
    cluster: &ClusterSpec,
) -> f64 {
    let mut intra_worst: f64 = 0.0;
    let mut inter_worst: f64 = 0.0;
    for y in 0..conf.tp {
        // GPUs of the stage-1 (x = 0) DP group for tensor rank y, by node.
        let mut per_node: std::collections::BTreeMap<usize, usize> = Default::default();
        for z in 0..conf.dp {
            *per_node.entry(mapping.node(cluster, 0, y, z)).or_insert(0) += 1;
        }
        for (&node, &count) in &per_node {
            if count >= 2 {
                let t = 4.0 * (count - 1) as f64 * msg_dp / (count as f64 * bw.intra[node] * 1e9);
                intra_worst = intra_worst.max(t);
            }
        }
        let nodes: Vec<usize> = per_node.keys().copied().collect();
        if nodes.len() >= 2 {
            let mut min_bw = f64::INFINITY;
            for &a in &nodes {
                for &b in &nodes {
                    if a != b {
                        min_bw = min_bw.min(bw.inter[a][b]);
                    }
                }
            }
            let m = nodes.len() as f64;
            let t = 2.0 * (m - 1.0) * msg_dp / (m * min_bw * 1e9);
            inter_worst = inter_worst.max(t);
        }
    }
    intra_worst + inter_worst
}

/// Full latency decomposition of one training iteration under the refined
/// model, with the inputs echoed for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub c: f64,
    pub t_tp: f64,
    pub t_pp: f64,
    pub t_bubble: f64,
    pub t_straggler: f64,
    pub t_dp: f64,
    pub t_total: f64,
    pub pp: u64,
    pub n_mb: u64,
    pub msg_pp: f64,
    pub msg_dp: f64,
}

/// `T = T_bubble * (n_mb/pp) + T_straggler + T_DP`, with n_mb/pp taken as a
/// real number.
pub fn t_pipette(
    conf: &ParallelConfig,
    mapping: &WorkerMapping,
    bw: &BandwidthMatrix,
    profile: &ComputeProfile,
    model: &ModelSpec,
    cluster: &ClusterSpec,
) -> Result<LatencyBreakdown> {
    let (c, t_tp) = stage_compute(profile, model, conf)?;
    let msg = message_sizes(model, conf);
    let pp_comm = t_pp_comm(mapping, bw, msg.msg_pp, conf, cluster);
    let dp_comm = t_dp_comm(mapping, bw, msg.msg_dp, conf, cluster);
    let bubble = t_bubble(conf.pp, c, t_tp, pp_comm);
    let straggler = t_straggler(conf.pp, c, t_tp);
    let total = bubble * (conf.n_mb as f64 / conf.pp as f64) + straggler + dp_comm;
    Ok(LatencyBreakdown {
        c,
        t_tp,
        t_pp: pp_comm,
        t_bubble: bubble,
        t_straggler: straggler,
        t_dp: dp_comm,
        t_total: total,
        pp: conf.pp,
        n_mb: conf.n_mb,
        msg_pp: msg.msg_pp,
        msg_dp: msg.msg_dp,
    })
}

/// Prior-art model: straggler + bubble terms with a single nominal
/// bandwidth (flat-ring all-reduce for the DP term), mapping-agnostic.
pub fn t_prev(
    conf: &ParallelConfig,
    bw_nominal: f64,
    profile: &ComputeProfile,
    model: &ModelSpec,
) -> Result<f64> {
    let (c, t_tp) = stage_compute(profile, model, conf)?;
    let msg = message_sizes(model, conf);
    let t_pp = 2.0 * msg.msg_pp / (bw_nominal * 1e9);
    let t_dp = if conf.dp > 1 {
        let d = conf.dp as f64;
        2.0 * (d - 1.0) * msg.msg_dp / (d * bw_nominal * 1e9)
    } else {
        0.0
    };
    Ok((conf.n_mb - 1) as f64 * (c + t_tp)
        + conf.pp as f64 * (c + t_tp)
        + (conf.pp - 1) as f64 * t_pp
        + t_dp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapsearch::initial_mapping;
    use crate::topology::synth_topology;
    use rand::SeedableRng;

    fn cluster(n_nodes: u64, gpus_per_node: u64) -> ClusterSpec {
        ClusterSpec {
            n_nodes,
            gpus_per_node,
            mem_limit_per_gpu: 32768.0,
            topology_id: String::new(),
        }
    }

    fn model() -> ModelSpec {
        ModelSpec {
            n_layers: 24,
            n_hidden: 1024,
            n_heads: 16,
            seq_len: 1024,
            vocab_size: 50000,
            bytes_per_element: 2,
        }
    }

    fn conf(pp: u64, tp: u64, dp: u64, cluster: &ClusterSpec, bs_micro: u64) -> ParallelConfig {
        ParallelConfig::new(pp, tp, dp, 8 * dp, bs_micro, cluster).unwrap()
    }

    #[test]
    fn stage_compute_uses_ceiling() {
        let c = cluster(4, 1);
        let cf = conf(4, 1, 1, &c, 1);
        let p = ComputeProfile::uniform(0.01, 0.0);
        let (comp, _) = stage_compute(&p, &model(), &cf).unwrap();
        assert!((comp - 0.06).abs() < 1e-12);

        let mut m = model();
        m.n_layers = 4;
        let (comp, _) = stage_compute(&p, &m, &cf).unwrap();
        assert!((comp - 0.01).abs() < 1e-12);
    }

    #[test]
    fn stage_compute_rejects_thin_models() {
        let c = cluster(4, 1);
        let cf = conf(4, 1, 1, &c, 1);
        let mut m = model();
        m.n_layers = 3;
        assert!(stage_compute(&ComputeProfile::uniform(0.01, 0.0), &m, &cf).is_err());
        let empty = ComputeProfile { entries: vec![] };
        assert!(stage_compute(&empty, &model(), &cf).is_err());
    }

    #[test]
    fn lookup_interpolates_between_tp_neighbors() {
        let mk = |tp: u64, v: f64| ProfileEntry {
            tp,
            bs_micro: 1,
            compute_per_layer: v,
            tp_comm_per_layer: v / 10.0,
        };
        let p = ComputeProfile {
            entries: vec![mk(1, 0.08), mk(2, 0.05), mk(8, 0.02)],
        };
        let (v, _) = p.lookup(4, 1).unwrap();
        assert!(v > 0.02 && v < 0.05, "interpolated {v} outside neighbors");
        // log-linear oracle in the coordinate u = -ln(tp)
        let frac = ((4f64).ln() - (2f64).ln()) / ((8f64).ln() - (2f64).ln());
        let oracle = (0.05f64.ln() + (0.02f64.ln() - 0.05f64.ln()) * frac).exp();
        assert!((v - oracle).abs() < 1e-12);
        // clamping outside the table
        assert_eq!(p.lookup(16, 1).unwrap().0, 0.02);
        assert_eq!(p.lookup(1, 64).unwrap().0, 0.08);
    }

    #[test]
    fn message_size_arithmetic() {
        let c = cluster(1, 1);
        let cf = conf(1, 1, 1, &c, 1);
        let m = ModelSpec {
            n_layers: 24,
            n_hidden: 1024,
            n_heads: 16,
            seq_len: 1024,
            vocab_size: 50000,
            bytes_per_element: 2,
        };
        let s = message_sizes(&m, &cf);
        assert_eq!(s.msg_pp, 2_097_152.0);
        assert_eq!(s.msg_dp, m.n_params() as f64 * 2.0);

        let cf2 = conf(1, 1, 1, &c, 2);
        let s2 = message_sizes(&m, &cf2);
        assert_eq!(s2.msg_pp, 2.0 * s.msg_pp);
        assert_eq!(s2.msg_dp, s.msg_dp);
    }

    #[test]
    fn bubble_and_straggler_spot_values() {
        assert!((t_bubble(1, 2.0, 0.5, 9.0) - 2.5).abs() < 1e-12);
        assert!((t_bubble(3, 1.0, 0.0, 0.1) - 3.2).abs() < 1e-12);
        assert!((t_bubble(2, 0.0, 0.0, 1.0) - 1.0).abs() < 1e-12);
        assert_eq!(t_straggler(1, 5.0, 5.0), 0.0);
        assert!((t_straggler(4, 1.0, 0.25) - 3.75).abs() < 1e-12);
        assert!((t_straggler(3, 2.0, 0.0) - 2.0 * t_straggler(3, 1.0, 0.0)).abs() < 1e-12);
    }

    #[test]
    fn pp_comm_single_hop() {
        let c = cluster(2, 1);
        let cf = conf(2, 1, 1, &c, 1);
        let bw = synth_topology(2, 10.0, 10.0, 0.0, 300.0, 0).unwrap();
        let m = initial_mapping(&cf, &c).unwrap();
        let t = t_pp_comm(&m, &bw, 1e9, &cf, &c);
        assert!((t - 0.2).abs() < 1e-12);

        let cf1 = conf(1, 1, 2, &c, 1);
        let m1 = initial_mapping(&cf1, &c).unwrap();
        assert_eq!(t_pp_comm(&m1, &bw, 1e9, &cf1, &c), 0.0);
    }

    #[test]
    fn pp_comm_takes_slowest_path() {
        // two dp paths over 4 nodes; plant a slow link on the second path
        let c = cluster(4, 1);
        let cf = conf(2, 1, 2, &c, 1);
        let mut bw = synth_topology(4, 10.0, 10.0, 0.0, 300.0, 0).unwrap();
        let m = initial_mapping(&cf, &c).unwrap();
        // path z=1 runs nodes 2 -> 3
        let (a, b) = (m.node(&c, 0, 0, 1), m.node(&c, 1, 0, 1));
        bw.inter[a][b] = 5.0;
        let t = t_pp_comm(&m, &bw, 1e9, &cf, &c);
        // brute-force max over both paths
        let mut oracle: f64 = 0.0;
        for z in 0..2 {
            let g1 = m.gpu(0, 0, z);
            let g2 = m.gpu(1, 0, z);
            oracle = oracle.max(2.0 * 1e9 / (bw.gpu_pair(&c, g1, g2) * 1e9));
        }
        assert_eq!(t, oracle);
        assert!((t - 0.4).abs() < 1e-12);
    }

    #[test]
    fn dp_comm_spot_values() {
        // dp=1 -> 0
        let c1 = cluster(1, 1);
        let cf1 = conf(1, 1, 1, &c1, 1);
        let bw1 = synth_topology(1, 10.0, 10.0, 0.0, 300.0, 0).unwrap();
        let m1 = initial_mapping(&cf1, &c1).unwrap();
        assert_eq!(t_dp_comm(&m1, &bw1, 1e9, &cf1, &c1), 0.0);

        // two nodes, one GPU each: pure inter-node ring of size 2
        let c2 = cluster(2, 1);
        let cf2 = conf(1, 1, 2, &c2, 1);
        let bw2 = synth_topology(2, 10.0, 10.0, 0.0, 300.0, 0).unwrap();
        let m2 = initial_mapping(&cf2, &c2).unwrap();
        let t = t_dp_comm(&m2, &bw2, 1e9, &cf2, &c2);
        assert!((t - 0.1).abs() < 1e-12);
    }

    #[test]
    fn dp_comm_uses_min_link() {
        let c = cluster(2, 1);
        let cf = conf(1, 1, 2, &c, 1);
        let mut bw = synth_topology(2, 10.0, 10.0, 0.0, 300.0, 0).unwrap();
        bw.inter[1][0] = 5.0;
        let m = initial_mapping(&cf, &c).unwrap();
        let t = t_dp_comm(&m, &bw, 1e9, &cf, &c);
        // brute-force min over participating links
        let min_bw = bw.inter[0][1].min(bw.inter[1][0]);
        assert_eq!(min_bw, 5.0);
        assert!((t - 2.0 * 1e9 / (2.0 * min_bw * 1e9)).abs() < 1e-15);
    }

    #[test]
    fn pipette_degenerate_pipeline() {
        // pp=1, n_mb=4, C=1.0, T_TP=0.1 -> 4*1.1 + 0 + t_dp
        let c = cluster(2, 1);
        let cf = ParallelConfig::new(1, 1, 2, 8, 1, &c).unwrap();
        assert_eq!(cf.n_mb, 4);
        let mut m = model();
        m.n_layers = 1;
        let p = ComputeProfile::uniform(1.0, 0.1);
        let bw = synth_topology(2, 10.0, 10.0, 0.0, 300.0, 0).unwrap();
        let map = initial_mapping(&cf, &c).unwrap();
        let b = t_pipette(&cf, &map, &bw, &p, &m, &c).unwrap();
        let expected = 4.0 * 1.1 + b.t_dp;
        assert!((b.t_total - expected).abs() < 1e-12);
        assert!(b.t_dp > 0.0);
    }

    #[test]
    fn pipette_matches_hand_trace() {
        // pp=2, n_mb=2, C=2, no comm -> 6.0
        let c = cluster(2, 1);
        let cf = ParallelConfig::new(2, 1, 1, 2, 1, &c).unwrap();
        assert_eq!(cf.n_mb, 2);
        let mut m = model();
        m.n_layers = 2;
        m.n_hidden = 16;
        m.n_heads = 16;
        let p = ComputeProfile::uniform(2.0, 0.0); // one layer per stage -> C = 2
                                                   // huge bandwidth so comm terms vanish numerically
        let bw = synth_topology(2, 1e12, 1e12, 0.0, 1e12, 0).unwrap();
        let map = initial_mapping(&cf, &c).unwrap();
        let b = t_pipette(&cf, &map, &bw, &p, &m, &c).unwrap();
        assert!((b.t_total - 6.0).abs() < 1e-6);
    }

    #[test]
    fn homogeneous_bw_mapping_invariance() {
        let c = cluster(4, 1);
        let cf = conf(2, 1, 2, &c, 1);
        let bw = synth_topology(4, 10.0, 10.0, 0.0, 300.0, 0).unwrap();
        let p = ComputeProfile::uniform(0.01, 0.001);
        let m = model();
        let map_a = initial_mapping(&cf, &c).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let map_b =
            crate::mapsearch::propose_move(&map_a, &cf, crate::mapsearch::MoveKind::Swap, &mut rng);
        let ta = t_pipette(&cf, &map_a, &bw, &p, &m, &c).unwrap().t_total;
        let tb = t_pipette(&cf, &map_b, &bw, &p, &m, &c).unwrap().t_total;
        assert!((ta - tb).abs() < 1e-15);
    }

    #[test]
    fn prev_model_spot_values() {
        // pp=2, n_mb=2, C=2, comm ~ 0 -> 1*2 + 2*2 = 6.0
        let c = cluster(2, 1);
        let cf = ParallelConfig::new(2, 1, 1, 2, 1, &c).unwrap();
        let mut m = model();
        m.n_layers = 2;
        let p = ComputeProfile::uniform(2.0, 0.0); // one layer per stage -> C = 2
        let t = t_prev(&cf, 1e12, &p, &m).unwrap();
        assert!((t - 6.0).abs() < 1e-6);
    }

    #[test]
    fn prev_vs_pipette_difference_is_algebraic() {
        // t_pipette - t_prev = (n_mb/pp - 1) * (pp-1) * t_pp
        //                      + (t_dp_hier - t_dp_flat)      [C terms cancel]
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let c = cluster(4, 1);
            let bs_micro = 1 << rng.random_range(0..3);
            let n_mb_factor = 1 << rng.random_range(1..4);
            let cf =
                ParallelConfig::new(2, 1, 2, 2 * bs_micro * n_mb_factor, bs_micro, &c).unwrap();
            let m = model();
            let p = ComputeProfile::uniform(0.01 + rng.random::<f64>() * 0.1, 0.0);
            let bw = synth_topology(4, 10.0, 10.0, 0.0, 300.0, 0).unwrap();
            let map = initial_mapping(&cf, &c).unwrap();
            let bd = t_pipette(&cf, &map, &bw, &p, &m, &c).unwrap();
            let prev = t_prev(&cf, bw.max_bandwidth(), &p, &m).unwrap();
            let msg = message_sizes(&m, &cf);
            let t_pp_nom = 2.0 * msg.msg_pp / (bw.max_bandwidth() * 1e9);
            let dp_flat =
                2.0 * (cf.dp - 1) as f64 * msg.msg_dp / (cf.dp as f64 * bw.max_bandwidth() * 1e9);
            let expected_diff = (cf.n_mb as f64 / cf.pp as f64) * (cf.pp - 1) as f64 * bd.t_pp
                - (cf.pp - 1) as f64 * t_pp_nom
                + bd.t_dp
                - dp_flat;
            assert!(
                ((bd.t_total - prev) - expected_diff).abs() < 1e-9,
                "algebraic difference mismatch"
            );
        }
    }
}
