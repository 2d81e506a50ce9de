//! Command-line driver: topology generation/ingestion, memory-model
//! training, configuration search, schedule simulation, and latency-model
//! comparison sweeps.
//!
//! Exit codes: 0 success, 1 no feasible configuration, 2 input or
//! validation error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pipette_core::latency::{t_bubble, t_straggler, ComputeProfile};
use pipette_core::memest;
use pipette_core::model::{ClusterSpec, ModelSpec, ParallelConfig};
use pipette_core::schedsim::{simulate, trace_export, Schedule, SimConfig};
use pipette_core::search::{search, SearchOptions};
use pipette_core::topology;

#[derive(Parser)]
#[command(
    name = "pipette",
    version,
    about = "3D-parallelism training configurator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic heterogeneous bandwidth matrix (CSV).
    GenTopology {
        #[arg(long)]
        nodes: usize,
        #[arg(long, default_value_t = 12.5)]
        fast: f64,
        #[arg(long, default_value_t = 6.25)]
        slow: f64,
        #[arg(long, default_value_t = 0.25)]
        slow_fraction: f64,
        #[arg(long, default_value_t = 300.0)]
        intra: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a bandwidth matrix CSV and report link statistics.
    ParseTopology {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        nodes: usize,
        /// Optional JSON serialization of the parsed matrix.
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Train the MLP memory estimator from a profiled sample CSV.
    TrainMem {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        iterations: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict peak per-GPU memory for one configuration.
    EstimateMem {
        #[arg(long)]
        memmodel: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[arg(long)]
        pp: u64,
        #[arg(long)]
        tp: u64,
        #[arg(long)]
        dp: u64,
        #[arg(long)]
        bs_global: u64,
        #[arg(long)]
        bs_micro: u64,
        #[arg(long, default_value_t = 0.10)]
        margin: f64,
    },
    /// Search parallelization configurations and worker mappings.
    Search {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        memmodel: PathBuf,
        #[arg(long)]
        bs_global: u64,
        #[arg(long, default_value_t = 2000)]
        sa_iterations: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.10)]
        margin: f64,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Evaluate candidates in parallel (results identical either way).
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one pipeline schedule and export its event trace.
    Simulate {
        #[arg(long)]
        pp: u64,
        #[arg(long)]
        n_mb: u64,
        #[arg(long, default_value_t = 1.0)]
        fwd: f64,
        #[arg(long, default_value_t = 2.0)]
        bwd: f64,
        #[arg(long, default_value_t = 0.0)]
        hop: f64,
        #[arg(long, default_value_t = 0.0)]
        dp_time: f64,
        #[arg(long, value_enum, default_value_t = ScheduleArg::OneFOneB)]
        schedule: ScheduleArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Compare both closed-form latency models against the simulator.
    CompareModels {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    #[value(name = "1f1b")]
    OneFOneB,
    #[value(name = "gpipe")]
    GPipe,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Schedule {
        match s {
            ScheduleArg::OneFOneB => Schedule::OneFOneB,
            ScheduleArg::GPipe => Schedule::GPipeStyle,
        }
    }
}

/// Reproducibility record embedded in every structured output; CSV
/// artifacts get it as a `.manifest.json` sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    tool_version: String,
    subcommand: String,
    args: serde_json::Value,
    seed: Option<u64>,
}

impl RunManifest {
    fn new(subcommand: &str, args: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            args,
            seed,
        }
    }
}

#[derive(Serialize)]
struct Artifact<T: Serialize> {
    manifest: RunManifest,
    result: T,
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp",
            path.file_name().unwrap().to_string_lossy()
        )),
        None => PathBuf::from(format!(".{}.tmp", path.to_string_lossy())),
    };
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, manifest: RunManifest, result: T) -> Result<()> {
    let artifact = Artifact { manifest, result };
    let mut text = serde_json::to_string_pretty(&artifact)?;
    text.push('\n');
    write_atomic(path, &text)
}

fn write_csv_with_sidecar(path: &Path, manifest: &RunManifest, csv: &str) -> Result<()> {
    write_atomic(path, csv)?;
    let sidecar = path.with_extension(format!(
        "{}manifest.json",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    write_atomic(&sidecar, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {} file {}", what, path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {} file {}", what, path.display()))
}

/// Memory-model files are themselves artifacts with a manifest wrapper;
/// accept both wrapped and bare forms.
fn read_memmodel(path: &Path) -> Result<memest::MemoryModel> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading memory model {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let inner = value.get("result").cloned().unwrap_or(value);
    let model: memest::MemoryModel = serde_json::from_value(inner)
        .with_context(|| format!("parsing memory model {}", path.display()))?;
    model.validate().map_err(|e| anyhow!(e))?;
    Ok(model)
}

#[derive(Debug, Deserialize, Serialize)]
struct SweepSpec {
    /// Per-stage combined compute latency C, seconds.
    c: f64,
    /// Per-stage tensor-parallel all-reduce latency, seconds.
    #[serde(default)]
    t_tp: f64,
    /// One-way inter-stage hop time, seconds.
    #[serde(default)]
    hop: f64,
    #[serde(default)]
    dp_time: f64,
    /// Fraction of C+T_TP spent in the forward block.
    #[serde(default = "default_fwd_fraction")]
    fwd_fraction: f64,
    pp: Vec<u64>,
    /// n_mb = pp * multiplier per row.
    n_mb_multipliers: Vec<u64>,
}

fn default_fwd_fraction() -> f64 {
    0.5
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenTopology {
            nodes,
            fast,
            slow,
            slow_fraction,
            intra,
            seed,
            out,
        } => {
            let m = topology::synth_topology(nodes, fast, slow, slow_fraction, intra, seed)
                .map_err(|e| anyhow!(e))?;
            let manifest = RunManifest::new(
                "gen-topology",
                serde_json::json!({
                    "nodes": nodes, "fast": fast, "slow": slow,
                    "slow_fraction": slow_fraction, "intra": intra,
                }),
                Some(seed),
            );
            write_csv_with_sidecar(&out, &manifest, &m.to_csv())?;
            println!("wrote {} ({} nodes)", out.display(), nodes);
            Ok(0)
        }
        Command::ParseTopology {
            input,
            nodes,
            json_out,
        } => {
            let text = std::fs::read_to_string(&input)
                .with_context(|| format!("reading topology {}", input.display()))?;
            let m = topology::parse_matrix(&text, nodes).map_err(|e| anyhow!(e))?;
            let inter: Vec<f64> = m
                .inter
                .iter()
                .enumerate()
                .flat_map(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .filter(move |(j, _)| *j != i)
                        .map(|(_, &v)| v)
                })
                .collect();
            let min = inter.iter().copied().fold(f64::INFINITY, f64::min);
            let max = inter.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = inter.iter().sum::<f64>() / inter.len().max(1) as f64;
            println!(
                "{}: {} nodes, inter-node GB/s min/mean/max = {min:.3}/{mean:.3}/{max:.3}",
                input.display(),
                nodes
            );
            if let Some(path) = json_out {
                let manifest = RunManifest::new(
                    "parse-topology",
                    serde_json::json!({"input": input, "nodes": nodes}),
                    None,
                );
                write_json(&path, manifest, &m)?;
            }
            Ok(0)
        }
        Command::TrainMem {
            samples,
            iterations,
            seed,
            out,
        } => {
            let text = std::fs::read_to_string(&samples)
                .with_context(|| format!("reading samples {}", samples.display()))?;
            let data = memest::parse_samples(&text).map_err(|e| anyhow!(e))?;
            let model = memest::train(&data, iterations, seed).map_err(|e| anyhow!(e))?;
            let manifest = RunManifest::new(
                "train-mem",
                serde_json::json!({"samples": samples, "iterations": iterations}),
                Some(seed),
            );
            println!(
                "trained on {} samples, final loss {:.6}",
                data.len(),
                model.metadata.final_loss
            );
            write_json(&out, manifest, &model)?;
            Ok(0)
        }
        Command::EstimateMem {
            memmodel,
            model,
            cluster,
            pp,
            tp,
            dp,
            bs_global,
            bs_micro,
            margin,
        } => {
            let mm = read_memmodel(&memmodel)?;
            let ms: ModelSpec = read_json(&model, "model spec")?;
            ms.validate().map_err(|e| anyhow!(e))?;
            let cs: ClusterSpec = read_json(&cluster, "cluster spec")?;
            cs.validate().map_err(|e| anyhow!(e))?;
            let conf = ParallelConfig::new(pp, tp, dp, bs_global, bs_micro, &cs)
                .map_err(|e| anyhow!(e))?;
            let features = [
                cs.n_gpus() as f64,
                ms.n_layers as f64,
                ms.n_hidden as f64,
                ms.n_heads as f64,
                tp as f64,
                pp as f64,
                dp as f64,
                bs_micro as f64,
                conf.bs_mini as f64,
                bs_global as f64,
            ];
            let predicted = memest::predict(&mm, &features).map_err(|e| anyhow!(e))?;
            let heuristic = memest::heuristic_estimate(&ms, &conf, 16);
            let runnable = memest::is_runnable(predicted, cs.mem_limit_per_gpu, margin);
            println!("predicted_mib: {predicted:.1}");
            println!("heuristic_mib: {heuristic:.1}");
            println!(
                "runnable: {} (limit {:.1} MiB, margin {:.0}%)",
                runnable,
                cs.mem_limit_per_gpu,
                margin * 100.0
            );
            Ok(0)
        }
        Command::Search {
            model,
            cluster,
            topology: topo,
            profile,
            memmodel,
            bs_global,
            sa_iterations,
            seed,
            margin,
            top_k,
            parallel,
            out,
        } => {
            let ms: ModelSpec = read_json(&model, "model spec")?;
            let cs: ClusterSpec = read_json(&cluster, "cluster spec")?;
            cs.validate().map_err(|e| anyhow!(e))?;
            let text = std::fs::read_to_string(&topo)
                .with_context(|| format!("reading topology {}", topo.display()))?;
            let bw = topology::parse_matrix(&text, cs.n_nodes as usize).map_err(|e| anyhow!(e))?;
            let prof: ComputeProfile = read_json(&profile, "compute profile")?;
            let mm = read_memmodel(&memmodel)?;
            let opts = SearchOptions {
                bs_global,
                sa_iterations,
                seed,
                margin,
                top_k,
                parallel,
            };
            let result = search(&ms, &cs, &bw, &prof, &mm, &opts).map_err(|e| anyhow!(e))?;

            println!(
                "evaluated {} candidates, {} rejected as OOM",
                result.evaluated, result.rejected_oom
            );
            println!("rank  pp  tp  dp  bs_micro  n_mb  latency_s     pred_mem_mib");
            for (i, c) in result.top_k.iter().enumerate() {
                println!(
                    "{:>4}  {:>2}  {:>2}  {:>2}  {:>8}  {:>4}  {:<12.6}  {:.1}",
                    i + 1,
                    c.config.pp,
                    c.config.tp,
                    c.config.dp,
                    c.config.bs_micro,
                    c.config.n_mb,
                    c.latency,
                    c.predicted_mem
                );
            }
            let manifest = RunManifest::new(
                "search",
                serde_json::json!({
                    "model": model, "cluster": cluster, "topology": topo,
                    "profile": profile, "memmodel": memmodel,
                    "bs_global": bs_global, "sa_iterations": sa_iterations,
                    "margin": margin, "top_k": top_k, "parallel": parallel,
                }),
                Some(seed),
            );
            let all_oom = result.best.is_none();
            write_json(&out, manifest, &result)?;
            if all_oom {
                eprintln!("no feasible configuration: all candidates exceed the memory limit");
                return Ok(1);
            }
            Ok(0)
        }
        Command::Simulate {
            pp,
            n_mb,
            fwd,
            bwd,
            hop,
            dp_time,
            schedule,
            out,
            trace_out,
        } => {
            let sim = SimConfig::uniform(pp, n_mb, fwd, bwd, hop, dp_time, schedule.into());
            let result = simulate(&sim).map_err(|e| anyhow!(e))?;
            println!(
                "makespan: {:.6} s, peak in-flight per stage: {:?}",
                result.makespan, result.peak_inflight
            );
            let manifest = RunManifest::new("simulate", serde_json::to_value(&sim)?, None);
            if let Some(path) = &trace_out {
                write_csv_with_sidecar(path, &manifest, &trace_export(&result))?;
            }
            write_json(&out, manifest, &result)?;
            Ok(0)
        }
        Command::CompareModels { sweep, out } => {
            let spec: SweepSpec = read_json(&sweep, "sweep spec")?;
            if spec.pp.is_empty() || spec.n_mb_multipliers.is_empty() {
                bail!("sweep must list at least one pp and one n_mb multiplier");
            }
            if spec.c.is_nan()
                || spec.c <= 0.0
                || spec.hop < 0.0
                || spec.t_tp < 0.0
                || spec.dp_time < 0.0
            {
                bail!("sweep times must be positive (c) or non-negative");
            }
            let block = spec.c + spec.t_tp;
            let mut csv = String::from(
                "pp,n_mb,t_prev,t_pipette,sim_makespan,err_prev_pct,err_pipette_pct\n",
            );
            let mut mape_prev = 0.0;
            let mut mape_pipette = 0.0;
            let mut rows = 0;
            for &pp in &spec.pp {
                for &mult in &spec.n_mb_multipliers {
                    if pp == 0 || mult == 0 {
                        bail!("pp and multipliers must be >= 1");
                    }
                    let n_mb = pp * mult;
                    let sim = SimConfig::uniform(
                        pp,
                        n_mb,
                        block * spec.fwd_fraction,
                        block * (1.0 - spec.fwd_fraction),
                        spec.hop,
                        spec.dp_time,
                        Schedule::OneFOneB,
                    );
                    let makespan = simulate(&sim).map_err(|e| anyhow!(e))?.makespan;
                    // per-pipeline communication totals from the hop time
                    let t_pp = 2.0 * spec.hop * (pp - 1) as f64;
                    let pipette = t_bubble(pp, spec.c, spec.t_tp, t_pp) * (n_mb as f64 / pp as f64)
                        + t_straggler(pp, spec.c, spec.t_tp)
                        + spec.dp_time;
                    let prev = (n_mb - 1) as f64 * block
                        + pp as f64 * block
                        + (pp - 1) as f64 * 2.0 * spec.hop
                        + spec.dp_time;
                    let err_prev = (prev - makespan).abs() / makespan * 100.0;
                    let err_pipette = (pipette - makespan).abs() / makespan * 100.0;
                    mape_prev += err_prev;
                    mape_pipette += err_pipette;
                    rows += 1;
                    csv.push_str(&format!(
                        "{pp},{n_mb},{prev},{pipette},{makespan},{err_prev},{err_pipette}\n"
                    ));
                }
            }
            mape_prev /= rows as f64;
            mape_pipette /= rows as f64;
            println!("rows: {rows}");
            println!("MAPE t_prev:    {mape_prev:.4}%");
            println!("MAPE t_pipette: {mape_pipette:.4}%");
            let manifest = RunManifest::new("compare-models", serde_json::to_value(&spec)?, None);
            write_csv_with_sidecar(&out, &manifest, &csv)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
