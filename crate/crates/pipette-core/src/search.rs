//! Configuration enumeration and the top-level search: every (pp, tp, dp)
//! factorization crossed with every microbatch divisor, filtered by the
//! memory estimate, each surviving candidate refined by SA worker
//! dedication.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::ComputeProfile;
use crate::mapsearch::{sa_search, SaParams, WorkerMapping};
use crate::memest::{is_runnable, predict, MemoryModel, N_FEATURES};
use crate::model::{ClusterSpec, ModelSpec, ParallelConfig};
use crate::topology::BandwidthMatrix;

/// Ordered triples (pp, tp, dp) with product G, tp restricted to divisors
/// of gpus_per_node, in lexicographic order.
pub fn factorizations(g: u64, gpus_per_node: u64) -> Result<Vec<(u64, u64, u64)>> {
    if g < 1 || gpus_per_node < 1 || !g.is_multiple_of(gpus_per_node) {
        return Err(Error::invalid(
            "need G >= 1 and gpus_per_node >= 1 dividing G",
        ));
    }
    let mut out = Vec::new();
    for pp in divisors(g)? {
        for tp in divisors(g / pp)? {
            if !gpus_per_node.is_multiple_of(tp) {
                continue;
            }
            out.push((pp, tp, g / pp / tp));
        }
    }
    Ok(out)
}

/// All positive divisors of n, ascending.
pub fn divisors(n: u64) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::invalid("divisors of 0 are undefined"));
    }
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n.is_multiple_of(d) {
            small.push(d);
            if d != n / d {
                large.push(n / d);
            }
        }
        d += 1;
    }
    large.reverse();
    small.extend(large);
    Ok(small)
}

/// Stable per-candidate seed derivation (splitmix64 mixing); independent of
/// enumeration or evaluation order.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut state = master;
    for &p in parts {
        state = state.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(p);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        state = z ^ (z >> 31);
    }
    state
}

/// One scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: ParallelConfig,
    pub mapping: WorkerMapping,
    pub latency: f64,
    pub predicted_mem: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Option<Candidate>,
    pub top_k: Vec<Candidate>,
    pub rejected_oom: u64,
    pub evaluated: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchOptions {
    pub bs_global: u64,
    /// SA iterations per candidate.
    pub sa_iterations: u64,
    pub seed: u64,
    /// Soft margin applied to the memory limit.
    pub margin: f64,
    pub top_k: usize,
    /// Evaluate candidates in parallel; the result is identical either way.
    pub parallel: bool,
}

impl SearchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.bs_global == 0 {
            return Err(Error::invalid("bs_global must be >= 1"));
        }
        if self.sa_iterations == 0 {
            return Err(Error::invalid("sa_iterations must be >= 1"));
        }
        if !(0.0..=0.5).contains(&self.margin) {
            return Err(Error::invalid("margin must be in [0, 0.5]"));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be >= 1"));
        }
        Ok(())
    }
}

fn mem_features(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    conf: &ParallelConfig,
) -> [f64; N_FEATURES] {
    [
        cluster.n_gpus() as f64,
        model.n_layers as f64,
        model.n_hidden as f64,
        model.n_heads as f64,
        conf.tp as f64,
        conf.pp as f64,
        conf.dp as f64,
        conf.bs_micro as f64,
        conf.bs_mini as f64,
        conf.bs_global as f64,
    ]
}

enum Outcome {
    Oom,
    Scored(Box<Candidate>),
}

/// Full planning run over one cluster: deterministic for a given seed and
/// iteration budget, regardless of candidate-level parallelism.
#[allow(clippy::too_many_arguments)]
pub fn search(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    bw: &BandwidthMatrix,
    profile: &ComputeProfile,
    memmodel: &MemoryModel,
    opts: &SearchOptions,
) -> Result<SearchResult> {
    model.validate()?;
    cluster.validate()?;
    bw.validate()?;
    opts.validate()?;
    if bw.n_nodes as u64 != cluster.n_nodes {
        return Err(Error::invalid(format!(
            "bandwidth matrix has {} nodes, cluster has {}",
            bw.n_nodes, cluster.n_nodes
        )));
    }

    // Candidate list in canonical lexicographic order.
    let mut candidates: Vec<ParallelConfig> = Vec::new();
    for (pp, tp, dp) in factorizations(cluster.n_gpus(), cluster.gpus_per_node)? {
        if !opts.bs_global.is_multiple_of(dp) {
            continue;
        }
        if model.n_layers < pp {
            continue;
        }
        for bs_micro in divisors(opts.bs_global / dp)? {
            let conf = ParallelConfig::new(pp, tp, dp, opts.bs_global, bs_micro, cluster)?;
            candidates.push(conf);
        }
    }

    let evaluate = |conf: &ParallelConfig| -> Result<Outcome> {
        let predicted = predict(memmodel, &mem_features(model, cluster, conf))?;
        if !is_runnable(predicted, cluster.mem_limit_per_gpu, opts.margin) {
            return Ok(Outcome::Oom);
        }
        let sa_seed = derive_seed(opts.seed, &[conf.pp, conf.tp, conf.dp, conf.bs_micro]);
        let params = SaParams::with_iterations(opts.sa_iterations, sa_seed);
        let outcome = sa_search(conf, cluster, bw, profile, model, &params)?;
        Ok(Outcome::Scored(Box::new(Candidate {
            config: *conf,
            mapping: outcome.mapping,
            latency: outcome.latency,
            predicted_mem: predicted,
        })))
    };

    let outcomes: Vec<Result<Outcome>> = if opts.parallel {
        candidates.par_iter().map(evaluate).collect()
    } else {
        candidates.iter().map(evaluate).collect()
    };

    let mut scored: Vec<Candidate> = Vec::new();
    let mut rejected_oom = 0;
    for o in outcomes {
        match o? {
            Outcome::Oom => rejected_oom += 1,
            Outcome::Scored(c) => scored.push(*c),
        }
    }
    // ascending latency; ties broken by the canonical config order
    scored.sort_by(|a, b| {
        a.latency
            .partial_cmp(&b.latency)
            .unwrap()
            .then_with(|| key(&a.config).cmp(&key(&b.config)))
    });
    scored.truncate(opts.top_k);

    Ok(SearchResult {
        best: scored.first().cloned(),
        top_k: scored,
        rejected_oom,
        evaluated: candidates.len() as u64,
    })
}

fn key(c: &ParallelConfig) -> (u64, u64, u64, u64) {
    (c.pp, c.tp, c.dp, c.bs_micro)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisor_lists() {
        assert_eq!(divisors(6).unwrap(), vec![1, 2, 3, 6]);
        assert_eq!(divisors(1).unwrap(), vec![1]);
        assert_eq!(divisors(8).unwrap(), vec![1, 2, 4, 8]);
        assert!(divisors(0).is_err());
    }

    #[test]
    fn factorization_counts() {
        // exhaustive triple-enumeration oracle
        let oracle = |g: u64| {
            let mut n = 0;
            for pp in 1..=g {
                for tp in 1..=g {
                    for dp in 1..=g {
                        if pp * tp * dp == g {
                            n += 1;
                        }
                    }
                }
            }
            n
        };
        assert_eq!(factorizations(12, 12).unwrap().len(), oracle(12));
        assert_eq!(factorizations(12, 12).unwrap().len(), 18);
        assert_eq!(factorizations(1, 1).unwrap(), vec![(1, 1, 1)]);
        assert!(factorizations(12, 2).unwrap().contains(&(3, 2, 2)));
        assert!(factorizations(12, 5).is_err()); // gpus_per_node must divide G
    }

    #[test]
    fn factorizations_are_lexicographic_and_complete() {
        for g in [4u64, 12, 24] {
            let f = factorizations(g, g).unwrap();
            let mut sorted = f.clone();
            sorted.sort();
            assert_eq!(f, sorted);
            for (pp, tp, dp) in f {
                assert_eq!(pp * tp * dp, g);
            }
        }
    }

    #[test]
    fn factorization_products_exhaustive_up_to_1024() {
        for g in 1..=1024u64 {
            for (pp, tp, dp) in factorizations(g, g).unwrap() {
                assert_eq!(pp * tp * dp, g);
            }
        }
    }

    #[test]
    fn seed_derivation_is_order_sensitive_and_stable() {
        let a = derive_seed(1, &[2, 3, 4, 5]);
        let b = derive_seed(1, &[2, 3, 4, 5]);
        assert_eq!(a, b);
        assert_ne!(a, derive_seed(1, &[5, 4, 3, 2]));
        assert_ne!(a, derive_seed(2, &[2, 3, 4, 5]));
    }
}
