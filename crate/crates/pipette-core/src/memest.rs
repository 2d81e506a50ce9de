//! Per-GPU peak memory estimation.
//!
//! Two estimators: a closed-form heuristic (model state divided across
//! pipeline stages and tensor shards plus held activations) that is known
//! to underestimate, and a small trainable MLP over ten configuration
//! features. The runnability decision applies a soft margin to the device
//! limit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParallelConfig};

pub const N_FEATURES: usize = 10;
/// Fixed architecture: 5 weight layers, 200 hidden units each.
pub const HIDDEN_WIDTH: usize = 200;
pub const N_WEIGHT_LAYERS: usize = 5;
/// Lower bound on any prediction, MiB.
pub const PREDICTION_FLOOR_MIB: f64 = 1.0;

/// One profiled (configuration, measured peak memory) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySample {
    pub n_gpus: u64,
    pub n_layers: u64,
    pub n_hiddens: u64,
    pub n_heads: u64,
    pub tp: u64,
    pub pp: u64,
    pub dp: u64,
    pub bs_micro: u64,
    pub bs_mini: u64,
    pub bs_global: u64,
    /// Measured peak per-GPU memory, MiB.
    pub measured_max: f64,
}

impl MemorySample {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.n_gpus,
            self.n_layers,
            self.n_hiddens,
            self.n_heads,
            self.tp,
            self.pp,
            self.dp,
            self.bs_micro,
            self.bs_mini,
            self.bs_global,
        ];
        if fields.contains(&0) || self.measured_max.is_nan() || self.measured_max <= 0.0 {
            return Err(Error::invalid("memory sample fields must be positive"));
        }
        if self.tp * self.pp * self.dp != self.n_gpus {
            return Err(Error::invalid("pp*tp*dp must equal n_gpus"));
        }
        if !self.bs_global.is_multiple_of(self.dp) || self.bs_global / self.dp != self.bs_mini {
            return Err(Error::invalid("bs_mini must equal bs_global/dp"));
        }
        if !self.bs_mini.is_multiple_of(self.bs_micro) {
            return Err(Error::invalid("bs_micro must divide bs_mini"));
        }
        Ok(())
    }

    pub fn features(&self) -> [f64; N_FEATURES] {
        [
            self.n_gpus as f64,
            self.n_layers as f64,
            self.n_hiddens as f64,
            self.n_heads as f64,
            self.tp as f64,
            self.pp as f64,
            self.dp as f64,
            self.bs_micro as f64,
            self.bs_mini as f64,
            self.bs_global as f64,
        ]
    }

    pub const CSV_HEADER: &'static str =
        "n_gpus,n_layers,n_hiddens,n_heads,tp,pp,dp,bs_micro,bs_mini,bs_global,measured_max";
}

/// Parses the 11-column sample CSV (header required).
pub fn parse_samples(text: &str) -> Result<Vec<MemorySample>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::invalid("empty dataset"))?;
    if header.trim() != MemorySample::CSV_HEADER {
        return Err(Error::invalid(format!(
            "bad CSV header, expected {:?}",
            MemorySample::CSV_HEADER
        )));
    }
    let mut samples = Vec::new();
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 11 {
            return Err(Error::Parse {
                row: row + 1,
                col: cells.len(),
                msg: format!("expected 11 columns, got {}", cells.len()),
            });
        }
        let num = |col: usize| -> Result<u64> {
            cells[col].trim().parse().map_err(|_| Error::Parse {
                row: row + 1,
                col,
                msg: format!("not a count: {:?}", cells[col]),
            })
        };
        let s = MemorySample {
            n_gpus: num(0)?,
            n_layers: num(1)?,
            n_hiddens: num(2)?,
            n_heads: num(3)?,
            tp: num(4)?,
            pp: num(5)?,
            dp: num(6)?,
            bs_micro: num(7)?,
            bs_mini: num(8)?,
            bs_global: num(9)?,
            measured_max: cells[10].trim().parse().map_err(|_| Error::Parse {
                row: row + 1,
                col: 10,
                msg: format!("not a number: {:?}", cells[10]),
            })?,
        };
        s.validate()?;
        samples.push(s);
    }
    Ok(samples)
}

pub fn samples_to_csv(samples: &[MemorySample]) -> String {
    let mut out = String::from(MemorySample::CSV_HEADER);
    out.push('\n');
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            s.n_gpus,
            s.n_layers,
            s.n_hiddens,
            s.n_heads,
            s.tp,
            s.pp,
            s.dp,
            s.bs_micro,
            s.bs_mini,
            s.bs_global,
            s.measured_max
        ));
    }
    out
}

/// Closed-form baseline from per-GPU model state plus held activations.
/// `bytes_per_param_state` covers weights, gradients, and optimizer state
/// (16 for fp16 weights/grads with fp32 Adam state).
pub fn heuristic_estimate(
    model: &ModelSpec,
    conf: &ParallelConfig,
    bytes_per_param_state: u64,
) -> f64 {
    heuristic_from_params(
        model.n_params(),
        model.seq_len,
        model.n_hidden,
        model.n_layers,
        model.bytes_per_element,
        conf,
        bytes_per_param_state,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn heuristic_from_params(
    n_params: u64,
    seq_len: u64,
    n_hidden: u64,
    n_layers: u64,
    bytes_per_element: u64,
    conf: &ParallelConfig,
    bytes_per_param_state: u64,
) -> f64 {
    let state_bytes = n_params as f64 / (conf.pp * conf.tp) as f64 * bytes_per_param_state as f64;
    let layers_per_stage = n_layers.div_ceil(conf.pp) as f64;
    let held = conf.pp.min(conf.n_mb) as f64;
    let activation_bytes = conf.bs_micro as f64
        * seq_len as f64
        * n_hidden as f64
        * layers_per_stage
        * bytes_per_element as f64
        * held;
    (state_bytes + activation_bytes) / (1024.0 * 1024.0)
}

/// True iff `predicted <= (1 - margin) * limit`.
pub fn is_runnable(predicted: f64, limit: f64, margin: f64) -> bool {
    predicted <= (1.0 - margin) * limit
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetTransform {
    /// Train on ln(MiB), exponentiate on predict.
    Log,
    /// Train on raw MiB.
    Identity,
}

/// One dense layer; weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

impl DenseLayer {
    fn seeded(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        // uniform init scaled by fan-in
        let scale = 1.0 / (n_in as f64).sqrt();
        let weights = (0..n_in * n_out)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        DenseLayer {
            weights,
            biases: vec![0.0; n_out],
            n_in,
            n_out,
        }
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.n_out {
            let row = &self.weights[o * self.n_in..(o + 1) * self.n_in];
            let mut acc = self.biases[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub optimizer: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub n_weight_layers: usize,
    pub hidden_width: usize,
    pub final_loss: f64,
    /// Full-dataset loss every 1000 iterations (normalized space).
    pub loss_checkpoints: Vec<f64>,
    /// Feature indices whose std was clamped to 1 (zero variance).
    pub degenerate_features: Vec<usize>,
}

/// Trained memory estimator: MLP weights plus normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub layers: Vec<DenseLayer>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    pub target_transform: TargetTransform,
    pub metadata: ModelMetadata,
}

impl MemoryModel {
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != N_WEIGHT_LAYERS {
            return Err(Error::Model(format!(
                "expected {N_WEIGHT_LAYERS} weight layers, got {}",
                self.layers.len()
            )));
        }
        let stats_ok = self
            .feature_mean
            .iter()
            .chain(&self.feature_std)
            .all(|v| v.is_finite())
            && self.feature_std.iter().all(|&s| s > 0.0)
            && self.target_std > 0.0
            && self.target_mean.is_finite();
        if !stats_ok {
            return Err(Error::Model("normalization statistics invalid".into()));
        }
        Ok(())
    }

    fn forward_normalized(&self, features: &[f64; N_FEATURES]) -> f64 {
        let mut cur: Vec<f64> = features
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(&x, (&m, &s))| (x - m) / s)
            .collect();
        let mut next = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, &mut next);
            if i + 1 < self.layers.len() {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }
}

/// Predicted peak memory in MiB, clamped to a small positive floor.
pub fn predict(model: &MemoryModel, features: &[f64; N_FEATURES]) -> Result<f64> {
    model.validate()?;
    let raw = model.forward_normalized(features);
    let denorm = raw * model.target_std + model.target_mean;
    let value = match model.target_transform {
        TargetTransform::Log => denorm.exp(),
        TargetTransform::Identity => denorm,
    };
    if !value.is_finite() {
        return Err(Error::Model(format!("non-finite prediction: {value}")));
    }
    Ok(value.max(PREDICTION_FLOOR_MIB))
}

pub fn predict_sample(model: &MemoryModel, sample: &MemorySample) -> Result<f64> {
    predict(model, &sample.features())
}

struct Workspace {
    // per-layer pre-activation and activation buffers
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

/// Fits the MLP with Adam (lr 1e-3, batch 32) on standardized features and
/// log-space targets. Deterministic for a given seed.
pub fn train(samples: &[MemorySample], iterations: u64, seed: u64) -> Result<MemoryModel> {
    train_with_transform(samples, iterations, seed, TargetTransform::Log)
}

pub fn train_with_transform(
    samples: &[MemorySample],
    iterations: u64,
    seed: u64,
    transform: TargetTransform,
) -> Result<MemoryModel> {
    if iterations < 1 {
        return Err(Error::invalid("iterations must be >= 1"));
    }
    let distinct = {
        let mut feats: Vec<_> = samples
            .iter()
            .map(|s| s.features().map(f64::to_bits))
            .collect();
        feats.sort();
        feats.dedup();
        feats.len()
    };
    if distinct < 2 {
        return Err(Error::invalid("need >= 2 distinct samples"));
    }
    for s in samples {
        s.validate()?;
    }

    let n = samples.len();
    let features: Vec<[f64; N_FEATURES]> = samples.iter().map(|s| s.features()).collect();
    let raw_targets: Vec<f64> = samples
        .iter()
        .map(|s| match transform {
            TargetTransform::Log => s.measured_max.ln(),
            TargetTransform::Identity => s.measured_max,
        })
        .collect();

    // normalization statistics
    let mut mean = vec![0.0; N_FEATURES];
    let mut std = vec![0.0; N_FEATURES];
    for f in &features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    for f in &features {
        for ((s, x), m) in std.iter_mut().zip(f).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    let mut degenerate = Vec::new();
    for (i, s) in std.iter_mut().enumerate() {
        *s = (*s / n as f64).sqrt();
        if *s <= 0.0 {
            *s = 1.0;
            degenerate.push(i);
        }
    }
    let t_mean = raw_targets.iter().sum::<f64>() / n as f64;
    let t_var = raw_targets
        .iter()
        .map(|t| (t - t_mean) * (t - t_mean))
        .sum::<f64>()
        / n as f64;
    let t_std = if t_var.sqrt() > 0.0 {
        t_var.sqrt()
    } else {
        1.0
    };

    let norm_features: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            f.iter()
                .zip(mean.iter().zip(&std))
                .map(|(&x, (&m, &s))| (x - m) / s)
                .collect()
        })
        .collect();
    let targets: Vec<f64> = raw_targets.iter().map(|t| (t - t_mean) / t_std).collect();

    let sizes = [
        N_FEATURES,
        HIDDEN_WIDTH,
        HIDDEN_WIDTH,
        HIDDEN_WIDTH,
        HIDDEN_WIDTH,
        1,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<DenseLayer> = sizes
        .windows(2)
        .map(|w| DenseLayer::seeded(w[0], w[1], &mut rng))
        .collect();

    const LR: f64 = 1e-3;
    const BATCH: usize = 32;
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    let mut m_w: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.weights.len()]).collect();
    let mut v_w: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.weights.len()]).collect();
    let mut m_b: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.biases.len()]).collect();
    let mut v_b: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.biases.len()]).collect();
    let mut g_w: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.weights.len()]).collect();
    let mut g_b: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.biases.len()]).collect();

    let mut ws = Workspace {
        pre: sizes[1..].iter().map(|&s| vec![0.0; s]).collect(),
        act: sizes[1..].iter().map(|&s| vec![0.0; s]).collect(),
        delta: sizes[1..].iter().map(|&s| vec![0.0; s]).collect(),
    };

    let full_loss = |layers: &[DenseLayer], ws: &mut Workspace| -> f64 {
        let mut acc = 0.0;
        for (x, &t) in norm_features.iter().zip(&targets) {
            let y = forward(layers, x, ws);
            acc += (y - t) * (y - t);
        }
        acc / n as f64
    };

    let mut checkpoints = Vec::new();
    for step in 1..=iterations {
        for g in g_w.iter_mut().chain(g_b.iter_mut()) {
            for v in g.iter_mut() {
                *v = 0.0;
            }
        }
        let batch = BATCH.min(n);
        for _ in 0..batch {
            let idx = rng.random_range(0..n);
            let x = &norm_features[idx];
            let y = forward(&layers, x, &mut ws);
            let dloss = 2.0 * (y - targets[idx]) / batch as f64;
            backward(&layers, x, dloss, &mut ws, &mut g_w, &mut g_b);
        }
        let t = step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for (li, layer) in layers.iter_mut().enumerate() {
            for (i, w) in layer.weights.iter_mut().enumerate() {
                let g = g_w[li][i];
                m_w[li][i] = BETA1 * m_w[li][i] + (1.0 - BETA1) * g;
                v_w[li][i] = BETA2 * v_w[li][i] + (1.0 - BETA2) * g * g;
                *w -= LR * (m_w[li][i] / bc1) / ((v_w[li][i] / bc2).sqrt() + EPS);
            }
            for (i, b) in layer.biases.iter_mut().enumerate() {
                let g = g_b[li][i];
                m_b[li][i] = BETA1 * m_b[li][i] + (1.0 - BETA1) * g;
                v_b[li][i] = BETA2 * v_b[li][i] + (1.0 - BETA2) * g * g;
                *b -= LR * (m_b[li][i] / bc1) / ((v_b[li][i] / bc2).sqrt() + EPS);
            }
        }
        if step % 1000 == 0 {
            checkpoints.push(full_loss(&layers, &mut ws));
        }
    }
    let final_loss = full_loss(&layers, &mut ws);

    Ok(MemoryModel {
        layers,
        feature_mean: mean,
        feature_std: std,
        target_mean: t_mean,
        target_std: t_std,
        target_transform: transform,
        metadata: ModelMetadata {
            optimizer: "adam".into(),
            learning_rate: LR,
            batch_size: BATCH,
            iterations,
            seed,
            n_weight_layers: N_WEIGHT_LAYERS,
            hidden_width: HIDDEN_WIDTH,
            final_loss,
            loss_checkpoints: checkpoints,
            degenerate_features: degenerate,
        },
    })
}

fn forward(layers: &[DenseLayer], input: &[f64], ws: &mut Workspace) -> f64 {
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        let src: &[f64] = if i == 0 { input } else { &ws.act[i - 1] };
        let mut pre = std::mem::take(&mut ws.pre[i]);
        layer.forward(src, &mut pre);
        ws.act[i].clear();
        if i < last {
            ws.act[i].extend(pre.iter().map(|&v| v.max(0.0)));
        } else {
            ws.act[i].extend_from_slice(&pre);
        }
        ws.pre[i] = pre;
    }
    ws.act[last][0]
}

/// Accumulates gradients for one sample; assumes `forward` just ran on it.
fn backward(
    layers: &[DenseLayer],
    input: &[f64],
    dloss: f64,
    ws: &mut Workspace,
    g_w: &mut [Vec<f64>],
    g_b: &mut [Vec<f64>],
) {
    let last = layers.len() - 1;
    ws.delta[last][0] = dloss;
    for i in (0..layers.len()).rev() {
        let layer = &layers[i];
        let src: &[f64] = if i == 0 { input } else { &ws.act[i - 1] };
        for o in 0..layer.n_out {
            let d = ws.delta[i][o];
            if d == 0.0 {
                continue;
            }
            g_b[i][o] += d;
            let row = &mut g_w[i][o * layer.n_in..(o + 1) * layer.n_in];
            for (g, x) in row.iter_mut().zip(src) {
                *g += d * x;
            }
        }
        if i > 0 {
            let (head, tail) = ws.delta.split_at_mut(i);
            let cur = &tail[0];
            let prev = &mut head[i - 1];
            for v in prev.iter_mut() {
                *v = 0.0;
            }
            for (o, &d) in cur.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            // ReLU gate
            for (p, &pre) in prev.iter_mut().zip(&ws.pre[i - 1]) {
                if pre <= 0.0 {
                    *p = 0.0;
                }
            }
        }
    }
}
