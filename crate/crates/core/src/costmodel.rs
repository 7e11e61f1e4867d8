//! Closed-form MACs and parameter counts, operator-wise latency tables.
//!
//! MACs convention: a conv costs `Co·(Ci/g)·K·T` (padded taps included),
//! a linear layer `Fo·Fi`, the SE squeeze and excitation rescale `C·T`
//! each, the pooling attention its two 1×1 convs, and the weighted
//! statistics `2·C·T`. Batch norm, activations, additions and softmax are
//! free. Kernel transforms are folded into exported weights and cost
//! nothing at inference.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{conv1d, count_macs as counted, linear, Tensor};
use crate::space::{SpaceConfig, SubnetSpec};
use crate::supernet::{build, SupernetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub macs: u64,
    pub params: u64,
    pub latency_ms: Option<f64>,
}

/// One operator of the latency table.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "cell", rename_all = "lowercase")]
pub enum OpKey {
    Stem { kernel: usize, width: usize },
    Block { kernel: usize, width_in: usize, width: usize },
    Transform { inputs: usize, width: usize },
    Pool { width: usize },
    Fc { width: usize },
}

impl fmt::Display for OpKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKey::Stem { kernel, width } => write!(f, "stem(kernel={kernel}, width={width})"),
            OpKey::Block { kernel, width_in, width } => {
                write!(f, "block(kernel={kernel}, width_in={width_in}, width={width})")
            }
            OpKey::Transform { inputs, width } => write!(f, "transform(inputs={inputs}, width={width})"),
            OpKey::Pool { width } => write!(f, "pool(width={width})"),
            OpKey::Fc { width } => write!(f, "fc(width={width})"),
        }
    }
}

/// Operators along the active path of `spec`, in forward order.
pub fn op_keys(spec: &SubnetSpec) -> Vec<OpKey> {
    let c1 = spec.widths_front[0];
    let mut keys = vec![OpKey::Stem {
        kernel: spec.kernels[0],
        width: c1,
    }];
    for b in 0..spec.depth {
        keys.push(OpKey::Block {
            kernel: spec.kernels[b + 1],
            width_in: c1,
            width: spec.widths_front[b + 1],
        });
    }
    let c3 = spec.width_back;
    keys.push(OpKey::Transform {
        inputs: spec.depth * c1,
        width: c3,
    });
    keys.push(OpKey::Pool { width: c3 });
    keys.push(OpKey::Fc { width: c3 });
    keys
}

fn op_macs(key: &OpKey, cfg: &SupernetConfig, t: u64) -> u64 {
    let u = |x: usize| x as u64;
    match *key {
        OpKey::Stem { kernel, width } => u(width) * u(cfg.input_channels) * u(kernel) * t,
        OpKey::Block { kernel, width_in, width } => {
            let (c1, c2) = (u(width_in), u(width));
            let s = u(cfg.res2net_scale);
            let w = c2 / s;
            let r = u(cfg.se_width(width_in));
            let pointwise = 2 * c1 * c2 * t;
            let res2 = (s - 1) * w * w * u(kernel) * t;
            let se = c1 * t + 2 * c1 * r + c1 * t;
            pointwise + res2 + se
        }
        OpKey::Transform { inputs, width } => u(inputs) * u(width) * t,
        OpKey::Pool { width } => {
            let (c3, a) = (u(width), u(cfg.attention_channels));
            2 * c3 * a * t + 2 * c3 * t
        }
        OpKey::Fc { width } => u(cfg.embedding_dim) * 2 * u(width),
    }
}

fn op_params(key: &OpKey, cfg: &SupernetConfig) -> u64 {
    let u = |x: usize| x as u64;
    let conv = |co: u64, ci: u64, k: u64| co * ci * k + co;
    let bn = |c: u64| 2 * c;
    match *key {
        OpKey::Stem { kernel, width } => conv(u(width), u(cfg.input_channels), u(kernel)) + bn(u(width)),
        OpKey::Block { kernel, width_in, width } => {
            let (c1, c2) = (u(width_in), u(width));
            let s = u(cfg.res2net_scale);
            let w = c2 / s;
            let r = u(cfg.se_width(width_in));
            conv(c2, c1, 1)
                + bn(c2)
                + (s - 1) * (conv(w, w, u(kernel)) + bn(w))
                + conv(c1, c2, 1)
                + bn(c1)
                + (r * c1 + r)
                + (c1 * r + c1)
        }
        OpKey::Transform { inputs, width } => conv(u(width), u(inputs), 1),
        OpKey::Pool { width } => {
            let (c3, a) = (u(width), u(cfg.attention_channels));
            conv(a, c3, 1) + bn(a) + conv(c3, a, 1) + bn(2 * c3)
        }
        OpKey::Fc { width } => {
            let e = u(cfg.embedding_dim);
            e * 2 * u(width) + e + bn(e)
        }
    }
}

/// Multiply-accumulates of one `T`-frame utterance through `spec`.
pub fn count_macs(spec: &SubnetSpec, config: &SupernetConfig, frames: usize) -> Result<u64> {
    config.check_spec(spec)?;
    Ok(op_keys(spec).iter().map(|k| op_macs(k, config, frames as u64)).sum())
}

/// Weights, biases and BN affine parameters of the exported subnet.
pub fn count_params(spec: &SubnetSpec, config: &SupernetConfig) -> Result<u64> {
    config.check_spec(spec)?;
    Ok(op_keys(spec).iter().map(|k| op_params(k, config)).sum())
}

/// Counts MACs by running the real forward path on one zero utterance
/// with every multiply-accumulate site instrumented.
pub fn instrumented_macs(spec: &SubnetSpec, config: &SupernetConfig, frames: usize) -> Result<u64> {
    if frames == 0 {
        return Err(Error::InvalidArgument("instrumented count needs at least one frame".into()));
    }
    let weights = build(config, 0)?;
    let exported = weights.export_subnet(spec)?;
    let batch = Tensor::zeros(&[1, config.input_channels, frames]);
    let (out, macs) = counted(|| exported.forward(&batch));
    out?;
    Ok(macs)
}

pub fn cost_report(spec: &SubnetSpec, config: &SupernetConfig, frames: usize, table: Option<&LatencyTable>) -> Result<CostReport> {
    Ok(CostReport {
        macs: count_macs(spec, config, frames)?,
        params: count_params(spec, config)?,
        latency_ms: table.map(|t| estimate_latency(spec, t)).transpose()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyEntry {
    #[serde(flatten)]
    pub key: OpKey,
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub device: String,
    pub repeats: usize,
    pub warmup: usize,
    pub frames: usize,
    /// Set when each entry rests on a single timed run.
    #[serde(default)]
    pub low_confidence: bool,
    pub entries: Vec<LatencyEntry>,
    /// Keys whose measurement failed, with the runner's message.
    #[serde(default)]
    pub failures: Vec<String>,
}

impl LatencyTable {
    pub fn lookup(&self, key: &OpKey) -> Option<f64> {
        self.entries.iter().find(|e| &e.key == key).map(|e| e.ms)
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let table: LatencyTable = serde_json::from_str(s)?;
        if let Some(bad) = table.entries.iter().find(|e| !(e.ms > 0.0 && e.ms.is_finite())) {
            return Err(Error::Config(format!("latency of {} must be positive, got {}", bad.key, bad.ms)));
        }
        Ok(table)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Executes one operator and reports its wall time in milliseconds.
pub trait Runner {
    fn device(&self) -> String;
    fn run(&mut self, key: &OpKey, frames: usize) -> Result<f64>;
}

/// Every operator key the space can produce.
pub fn table_keys(space: &SpaceConfig) -> Vec<OpKey> {
    let mut keys = Vec::new();
    for &kernel in &space.kernel_options {
        for &width in &space.width_front_options {
            keys.push(OpKey::Stem { kernel, width });
        }
    }
    for &kernel in &space.kernel_options {
        for &width_in in &space.width_front_options {
            for &width in &space.width_front_options {
                keys.push(OpKey::Block { kernel, width_in, width });
            }
        }
    }
    let mut inputs: Vec<usize> = space
        .depth_options
        .iter()
        .flat_map(|d| space.width_front_options.iter().map(move |c| d * c))
        .collect();
    inputs.sort_unstable();
    inputs.dedup();
    for &width in &space.width_back_options {
        for &i in &inputs {
            keys.push(OpKey::Transform { inputs: i, width });
        }
    }
    for &width in &space.width_back_options {
        keys.push(OpKey::Pool { width });
    }
    for &width in &space.width_back_options {
        keys.push(OpKey::Fc { width });
    }
    keys
}

pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Measures the median of `repeats` runs after `warmup` discarded runs for
/// every operator of `space`.
pub fn build_latency_table(
    space: &SpaceConfig,
    runner: &mut dyn Runner,
    repeats: usize,
    warmup: usize,
    frames: usize,
) -> Result<LatencyTable> {
    build_latency_table_for(table_keys(space), runner, repeats, warmup, frames)
}

/// [`build_latency_table`] over an explicit operator list.
pub fn build_latency_table_for(
    keys: Vec<OpKey>,
    runner: &mut dyn Runner,
    repeats: usize,
    warmup: usize,
    frames: usize,
) -> Result<LatencyTable> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("latency table needs at least one timed run".into()));
    }
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    'keys: for key in keys {
        let mut samples = Vec::with_capacity(repeats);
        for i in 0..warmup + repeats {
            match runner.run(&key, frames) {
                Ok(ms) if i >= warmup => samples.push(ms.max(f64::MIN_POSITIVE)),
                Ok(_) => {}
                Err(e) => {
                    failures.push(format!("{key}: {e}"));
                    continue 'keys;
                }
            }
        }
        entries.push(LatencyEntry {
            key,
            ms: median(&mut samples),
        });
    }
    Ok(LatencyTable {
        device: runner.device(),
        repeats,
        warmup,
        frames,
        low_confidence: repeats == 1,
        entries,
        failures,
    })
}

/// Sum of table latencies along the active path.
pub fn estimate_latency(spec: &SubnetSpec, table: &LatencyTable) -> Result<f64> {
    let index: BTreeMap<&OpKey, f64> = table.entries.iter().map(|e| (&e.key, e.ms)).collect();
    op_keys(spec)
        .iter()
        .map(|k| index.get(k).copied().ok_or_else(|| Error::MissingLatency(k.to_string())))
        .sum()
}

/// Deterministic stand-in device: latency proportional to the operator's
/// MACs plus a fixed per-operator overhead.
pub struct AnalyticRunner {
    pub config: SupernetConfig,
    pub ns_per_mac: f64,
    pub overhead_ms: f64,
}

impl AnalyticRunner {
    pub fn new(config: SupernetConfig) -> Self {
        Self {
            config,
            ns_per_mac: 0.5,
            overhead_ms: 0.01,
        }
    }
}

impl Runner for AnalyticRunner {
    fn device(&self) -> String {
        "analytic".into()
    }

    fn run(&mut self, key: &OpKey, frames: usize) -> Result<f64> {
        Ok(self.overhead_ms + op_macs(key, &self.config, frames as u64) as f64 * self.ns_per_mac * 1e-6)
    }
}

/// Times each operator on this machine by running its dense kernels
/// (convolutions and affine maps) on random data.
pub struct TimingRunner {
    pub config: SupernetConfig,
    cache: BTreeMap<(usize, usize, usize), Tensor>,
}

impl TimingRunner {
    pub fn new(config: SupernetConfig) -> Self {
        Self {
            config,
            cache: BTreeMap::new(),
        }
    }

    fn ones(&mut self, shape: (usize, usize, usize)) -> Tensor {
        self.cache
            .entry(shape)
            .or_insert_with(|| Tensor::filled(&[shape.0, shape.1, shape.2], 0.01))
            .clone()
    }
}

impl Runner for TimingRunner {
    fn device(&self) -> String {
        format!("cpu-{}", std::env::consts::ARCH)
    }

    fn run(&mut self, key: &OpKey, t: usize) -> Result<f64> {
        let cfg = self.config.clone();
        let mut convs: Vec<((usize, usize, usize), (usize, usize, usize), usize)> = Vec::new();
        let mut dense: Vec<(usize, usize)> = Vec::new();
        match *key {
            OpKey::Stem { kernel, width } => convs.push(((1, cfg.input_channels, t), (width, cfg.input_channels, kernel), 1)),
            OpKey::Block { kernel, width_in, width } => {
                let w = width / cfg.res2net_scale;
                convs.push(((1, width_in, t), (width, width_in, 1), 1));
                for _ in 1..cfg.res2net_scale {
                    convs.push(((1, w, t), (w, w, kernel), 2));
                }
                convs.push(((1, width, t), (width_in, width, 1), 1));
                let r = cfg.se_width(width_in);
                dense.push((r, width_in));
                dense.push((width_in, r));
            }
            OpKey::Transform { inputs, width } => convs.push(((1, inputs, t), (width, inputs, 1), 1)),
            OpKey::Pool { width } => {
                convs.push(((1, width, t), (cfg.attention_channels, width, 1), 1));
                convs.push(((1, cfg.attention_channels, t), (width, cfg.attention_channels, 1), 1));
            }
            OpKey::Fc { width } => dense.push((cfg.embedding_dim, 2 * width)),
        }
        let inputs: Vec<(Tensor, Tensor, usize)> = convs
            .into_iter()
            .map(|(x, w, d)| (self.ones(x), self.ones(w), d))
            .collect();
        let mats: Vec<(Tensor, Tensor)> = dense
            .into_iter()
            .map(|(o, i)| (self.ones((1, 1, i)).reshape(vec![1, i]).expect("size"), self.ones((1, o, i)).reshape(vec![o, i]).expect("size")))
            .collect();
        let start = Instant::now();
        for (x, w, d) in &inputs {
            std::hint::black_box(conv1d(x, w, None, *d, 1)?);
        }
        for (x, w) in &mats {
            std::hint::black_box(linear(x, w, None)?);
        }
        Ok(start.elapsed().as_secs_f64() * 1e3)
    }
}
