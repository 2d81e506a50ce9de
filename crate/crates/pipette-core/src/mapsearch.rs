//! Fine-grained worker dedication: simulated annealing over bijections from
//! logical workers (x, y, z) to physical GPUs, minimizing modeled iteration
//! latency on a heterogeneous bandwidth matrix.
//!
//! Moves operate on node-slots: the unit of permutation is one tensor-parallel
//! group block of `tp` consecutive GPUs inside a node. Intra-node GPU order is
//! fixed, so tensor-parallel locality holds for every explored mapping.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::{t_pipette, ComputeProfile};
use crate::model::{ClusterSpec, ModelSpec, ParallelConfig};
use crate::topology::BandwidthMatrix;

/// Bijection from logical workers to physical GPU indices.
///
/// Worker (x, y, z) with pipeline stage x, tensor rank y, and data replica
/// z is flattened pipeline-major: `index = (x * tp + y) * dp + z`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerMapping {
    pub pp: u64,
    pub tp: u64,
    pub dp: u64,
    /// Physical GPU index per flattened worker index.
    pub assignment: Vec<usize>,
}

impl WorkerMapping {
    pub fn worker_index(&self, x: u64, y: u64, z: u64) -> usize {
        ((x * self.tp + y) * self.dp + z) as usize
    }

    /// GPU assigned to worker (x, y, z).
    pub fn gpu(&self, x: u64, y: u64, z: u64) -> usize {
        self.assignment[self.worker_index(x, y, z)]
    }

    /// Node hosting worker (x, y, z).
    pub fn node(&self, cluster: &ClusterSpec, x: u64, y: u64, z: u64) -> usize {
        cluster.node_of(self.gpu(x, y, z))
    }

    /// Reconstructs the slot permutation this mapping corresponds to:
    /// slot s (= x*dp + z) -> physical slot index.
    pub fn slot_permutation(&self, conf: &ParallelConfig) -> Vec<usize> {
        let mut perm = Vec::with_capacity((conf.pp * conf.dp) as usize);
        for x in 0..conf.pp {
            for z in 0..conf.dp {
                perm.push(self.gpu(x, 0, z) / conf.tp as usize);
            }
        }
        perm
    }

    /// Builds the mapping that places logical TP-group slot x*dp + z on
    /// physical slot `perm[x*dp + z]` (tp consecutive GPUs in one node).
    pub fn from_slot_permutation(conf: &ParallelConfig, perm: &[usize]) -> Self {
        let mut assignment = vec![0usize; conf.n_workers()];
        let mut m = WorkerMapping {
            pp: conf.pp,
            tp: conf.tp,
            dp: conf.dp,
            assignment: Vec::new(),
        };
        for x in 0..conf.pp {
            for z in 0..conf.dp {
                let slot = perm[(x * conf.dp + z) as usize];
                for y in 0..conf.tp {
                    assignment[m.worker_index(x, y, z)] = slot * conf.tp as usize + y as usize;
                }
            }
        }
        m.assignment = assignment;
        m
    }
}

/// Alphabetical initial mapping: data-parallel pipeline z occupies
/// consecutive node-slots starting at slot z*pp.
pub fn initial_mapping(conf: &ParallelConfig, cluster: &ClusterSpec) -> Result<WorkerMapping> {
    if conf.tp > cluster.gpus_per_node {
        return Err(Error::Infeasible(format!(
            "tp ({}) exceeds gpus_per_node ({})",
            conf.tp, cluster.gpus_per_node
        )));
    }
    let n_slots = (conf.pp * conf.dp) as usize;
    let perm: Vec<usize> = (0..n_slots)
        .map(|i| {
            let x = i / conf.dp as usize;
            let z = i % conf.dp as usize;
            z * conf.pp as usize + x
        })
        .collect();
    Ok(WorkerMapping::from_slot_permutation(conf, &perm))
}

/// True iff the mapping is a bijection onto valid GPU indices and every
/// tensor-parallel group sits inside one node.
pub fn validate_mapping(
    mapping: &WorkerMapping,
    conf: &ParallelConfig,
    cluster: &ClusterSpec,
) -> bool {
    let g = cluster.n_gpus() as usize;
    if mapping.pp != conf.pp || mapping.tp != conf.tp || mapping.dp != conf.dp {
        return false;
    }
    if mapping.assignment.len() != conf.n_workers() {
        return false;
    }
    let mut seen = vec![false; g];
    for &gpu in &mapping.assignment {
        if gpu >= g || seen[gpu] {
            return false;
        }
        seen[gpu] = true;
    }
    for x in 0..conf.pp {
        for z in 0..conf.dp {
            let node0 = mapping.node(cluster, x, 0, z);
            for y in 1..conf.tp {
                if mapping.node(cluster, x, y, z) != node0 {
                    return false;
                }
            }
        }
    }
    true
}

/// SA move kinds over the slot permutation string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MoveKind {
    /// Remove one element and reinsert it at a random position.
    Migration,
    /// Exchange two elements.
    Swap,
    /// Reverse a substring.
    Reverse,
}

fn apply_move(perm: &mut Vec<usize>, kind: MoveKind, rng: &mut ChaCha8Rng) {
    let n = perm.len();
    if n < 2 {
        return;
    }
    match kind {
        MoveKind::Migration => {
            let from = rng.random_range(0..n);
            let to = rng.random_range(0..n);
            let v = perm.remove(from);
            perm.insert(to, v);
        }
        MoveKind::Swap => {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            perm.swap(i, j);
        }
        MoveKind::Reverse => {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            let (lo, hi) = (i.min(j), i.max(j));
            perm[lo..=hi].reverse();
        }
    }
}

/// Applies one named move to a mapping; bijection and TP locality are
/// preserved by construction.
pub fn propose_move(
    mapping: &WorkerMapping,
    conf: &ParallelConfig,
    kind: MoveKind,
    rng: &mut ChaCha8Rng,
) -> WorkerMapping {
    let mut perm = mapping.slot_permutation(conf);
    apply_move(&mut perm, kind, rng);
    WorkerMapping::from_slot_permutation(conf, &perm)
}

/// Simulated annealing parameters. Budget is iteration-based for
/// reproducibility; wall-clock mode mirrors production use.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaParams {
    pub budget: SaBudget,
    /// Temperature decay coefficient per iteration.
    pub alpha: f64,
    /// Initial temperature; `None` self-calibrates from sampled moves.
    pub t_init: Option<f64>,
    pub seed: u64,
    /// Probabilities of (migration, swap, reverse); must sum to 1.
    pub move_weights: (f64, f64, f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum SaBudget {
    Iterations(u64),
    WallSeconds(f64),
}

impl SaParams {
    pub fn with_iterations(iterations: u64, seed: u64) -> Self {
        SaParams {
            budget: SaBudget::Iterations(iterations),
            alpha: 0.999,
            t_init: None,
            seed,
            move_weights: (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must be in (0, 1)"));
        }
        let (a, b, c) = self.move_weights;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("move_weights must be >= 0 and sum to 1"));
        }
        match self.budget {
            SaBudget::Iterations(0) => Err(Error::invalid("iteration budget must be positive")),
            SaBudget::WallSeconds(s) if s.is_nan() || s <= 0.0 => {
                Err(Error::invalid("wall-clock budget must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Outcome of one SA run: best mapping found, its objective, and the series
/// of best-ever objectives at each accepted improvement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaOutcome {
    pub mapping: WorkerMapping,
    pub latency: f64,
    pub history: Vec<f64>,
}

fn pick_move(weights: (f64, f64, f64), rng: &mut ChaCha8Rng) -> MoveKind {
    let r: f64 = rng.random();
    if r < weights.0 {
        MoveKind::Migration
    } else if r < weights.0 + weights.1 {
        MoveKind::Swap
    } else {
        MoveKind::Reverse
    }
}

/// Simulated annealing over worker mappings with the modeled iteration
/// latency as the objective.
pub fn sa_search(
    conf: &ParallelConfig,
    cluster: &ClusterSpec,
    bw: &BandwidthMatrix,
    profile: &ComputeProfile,
    model: &ModelSpec,
    params: &SaParams,
) -> Result<SaOutcome> {
    params.validate()?;
    let objective = |m: &WorkerMapping| -> Result<f64> {
        Ok(t_pipette(conf, m, bw, profile, model, cluster)?.t_total)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut current = initial_mapping(conf, cluster)?;
    let mut current_obj = objective(&current)?;
    let mut best = current.clone();
    let mut best_obj = current_obj;
    let mut history = vec![best_obj];

    // Self-calibrate the initial temperature so the median |delta| of 100
    // sampled moves is accepted with probability 0.8.
    let mut temperature = match params.t_init {
        Some(t) => t,
        None => {
            let mut deltas: Vec<f64> = Vec::with_capacity(100);
            for _ in 0..100 {
                let kind = pick_move(params.move_weights, &mut rng);
                let cand = propose_move(&current, conf, kind, &mut rng);
                deltas.push((objective(&cand)? - current_obj).abs());
            }
            deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = deltas[deltas.len() / 2];
            if median > 0.0 {
                median / -(0.8f64.ln())
            } else {
                1.0
            }
        }
    };

    let start = std::time::Instant::now();
    let mut iter: u64 = 0;
    loop {
        match params.budget {
            SaBudget::Iterations(n) => {
                if iter >= n {
                    break;
                }
            }
            SaBudget::WallSeconds(s) => {
                if start.elapsed().as_secs_f64() >= s {
                    break;
                }
            }
        }
        iter += 1;
        let kind = pick_move(params.move_weights, &mut rng);
        let cand = propose_move(&current, conf, kind, &mut rng);
        let cand_obj = objective(&cand)?;
        let delta = cand_obj - current_obj;
        let accept = delta <= 0.0 || {
            let p = (-delta / temperature).exp();
            rng.random::<f64>() < p
        };
        if accept {
            current = cand;
            current_obj = cand_obj;
            if current_obj < best_obj {
                best = current.clone();
                best_obj = current_obj;
                history.push(best_obj);
            }
        }
        temperature *= params.alpha;
    }

    Ok(SaOutcome {
        mapping: best,
        latency: best_obj,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(n_nodes: u64, gpus_per_node: u64) -> ClusterSpec {
        ClusterSpec {
            n_nodes,
            gpus_per_node,
            mem_limit_per_gpu: 32768.0,
            topology_id: String::new(),
        }
    }

    #[test]
    fn initial_mapping_matches_alphabetical_layout() {
        let c = cluster(6, 1);
        let conf = ParallelConfig::new(3, 1, 2, 4, 1, &c).unwrap();
        let m = initial_mapping(&conf, &c).unwrap();
        // pipeline z=0 on nodes 0,1,2; z=1 on nodes 3,4,5
        assert_eq!(
            (0..3).map(|x| m.node(&c, x, 0, 0)).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert_eq!(
            (0..3).map(|x| m.node(&c, x, 0, 1)).collect::<Vec<_>>(),
            vec![3, 4, 5]
        );
        assert!(validate_mapping(&m, &conf, &c));
    }

    #[test]
    fn initial_mapping_single_gpu() {
        let c = cluster(1, 1);
        let conf = ParallelConfig::new(1, 1, 1, 2, 1, &c).unwrap();
        let m = initial_mapping(&conf, &c).unwrap();
        assert_eq!(m.assignment, vec![0]);
    }

    #[test]
    fn infeasible_tp() {
        let c = cluster(2, 2);
        // bypass ParallelConfig's own check by constructing directly
        let conf = ParallelConfig {
            pp: 1,
            tp: 4,
            dp: 1,
            bs_global: 4,
            bs_mini: 4,
            bs_micro: 1,
            n_mb: 4,
        };
        assert!(initial_mapping(&conf, &c).is_err());
    }

    #[test]
    fn validate_rejects_duplicates_and_split_tp() {
        let c = cluster(2, 2);
        let conf = ParallelConfig::new(2, 2, 1, 4, 1, &c).unwrap();
        let mut m = initial_mapping(&conf, &c).unwrap();
        assert!(validate_mapping(&m, &conf, &c));
        let orig = m.assignment.clone();
        m.assignment[0] = m.assignment[1];
        assert!(!validate_mapping(&m, &conf, &c));
        // split a TP pair across nodes
        m.assignment = orig;
        m.assignment.swap(1, 2); // workers (0,1,0) and (1,0,0)
        assert!(!validate_mapping(&m, &conf, &c));
    }

    #[test]
    fn move_definitions_on_strings() {
        let base = vec![0usize, 1, 2, 3];
        let mut p = base.clone();
        p.swap(1, 3);
        assert_eq!(p, vec![0, 3, 2, 1]);

        let mut p = base.clone();
        p[1..=3].reverse();
        assert_eq!(p, vec![0, 3, 2, 1]);
        let mut p = base.clone();
        p[0..=3].reverse();
        assert_eq!(p, vec![3, 2, 1, 0]);

        let mut p = base.clone();
        let v = p.remove(0);
        p.insert(2, v);
        assert_eq!(p, vec![1, 2, 0, 3]);
    }

    #[test]
    fn proposed_moves_stay_valid() {
        let c = cluster(4, 2);
        let conf = ParallelConfig::new(2, 2, 2, 8, 2, &c).unwrap();
        let m = initial_mapping(&conf, &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [MoveKind::Migration, MoveKind::Swap, MoveKind::Reverse] {
            for _ in 0..50 {
                let next = propose_move(&m, &conf, kind, &mut rng);
                assert!(validate_mapping(&next, &conf, &c));
            }
        }
    }

    #[test]
    fn sa_on_homogeneous_bw_keeps_initial_objective() {
        use crate::topology::synth_topology;
        let c = cluster(4, 1);
        let conf = ParallelConfig::new(4, 1, 1, 4, 1, &c).unwrap();
        let bw = synth_topology(4, 10.0, 10.0, 0.0, 300.0, 0).unwrap();
        let profile = ComputeProfile::uniform(0.01, 0.0);
        let model = ModelSpec {
            n_layers: 8,
            n_hidden: 256,
            n_heads: 4,
            seq_len: 128,
            vocab_size: 1000,
            bytes_per_element: 2,
        };
        let params = SaParams::with_iterations(200, 11);
        let out = sa_search(&conf, &c, &bw, &profile, &model, &params).unwrap();
        let init = initial_mapping(&conf, &c).unwrap();
        let init_obj = t_pipette(&conf, &init, &bw, &profile, &model, &c)
            .unwrap()
            .t_total;
        assert!((out.latency - init_obj).abs() < 1e-15);
    }

    #[test]
    fn sa_deterministic_and_history_non_increasing() {
        use crate::topology::synth_topology;
        let c = cluster(6, 1);
        let conf = ParallelConfig::new(3, 1, 2, 4, 1, &c).unwrap();
        let bw = synth_topology(6, 10.0, 5.0, 0.3, 300.0, 17).unwrap();
        let profile = ComputeProfile::uniform(0.01, 0.0);
        let model = ModelSpec {
            n_layers: 12,
            n_hidden: 512,
            n_heads: 8,
            seq_len: 512,
            vocab_size: 5000,
            bytes_per_element: 2,
        };
        let params = SaParams::with_iterations(500, 23);
        let a = sa_search(&conf, &c, &bw, &profile, &model, &params).unwrap();
        let b = sa_search(&conf, &c, &bw, &profile, &model, &params).unwrap();
        assert_eq!(a.mapping, b.mapping);
        assert_eq!(a.latency.to_bits(), b.latency.to_bits());
        assert!(a.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(validate_mapping(&a.mapping, &conf, &c));
    }

    #[test]
    fn moves_on_single_slot_are_identity() {
        let c = cluster(1, 2);
        let conf = ParallelConfig::new(1, 2, 1, 2, 1, &c).unwrap();
        let m = initial_mapping(&conf, &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let next = propose_move(&m, &conf, MoveKind::Swap, &mut rng);
        assert_eq!(m, next);
    }
}
