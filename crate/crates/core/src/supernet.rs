//! The eight-cell dynamic TDNN supernet.
//!
//! Cells: `v1` stem conv, `v2..v5` Res2Net/SE blocks with dilations
//! (2,3,4,5), `v6` a 1×1 conv over the concatenated outputs of the active
//! blocks, `v7` attentive statistics pooling and `v8` the embedding layer.
//!
//! A [`SubnetSpec`] picks the first `C` channels of every dynamic layer,
//! the kernel of every dynamic conv (derived from the centre of the 5-tap
//! kernel through learned transforms), and skips the last blocks.
//!
//! Parameter names are stable and shared with [`ExportedSubnet`], whose
//! arrays are simply the sliced and transformed versions.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ema_update, BatchStats, BnMode, ParamStore, Tape, Tensor, Var};
use crate::space::{SpaceConfig, Stage, SubnetSpec, Violation};

/// Kernel sizes the transforms can produce from a 5-tap kernel.
pub const KERNEL_SIZES: [usize; 3] = [1, 3, 5];
const MAX_KERNEL: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    /// Feature channels of the input, `C0`.
    pub input_channels: usize,
    pub max_front_width: usize,
    pub max_back_width: usize,
    pub max_depth: usize,
    pub kernel_options: Vec<usize>,
    pub res2net_scale: usize,
    /// SE bottleneck is `C1 / se_reduction`.
    pub se_reduction: usize,
    /// Hidden channels of the pooling attention.
    pub attention_channels: usize,
    pub block_dilations: Vec<usize>,
    pub embedding_dim: usize,
    /// Width granularity of the coarse search space.
    pub width_step: usize,
    /// Default frames per utterance.
    pub frames: usize,
    pub bn_momentum: f64,
}

impl SupernetConfig {
    /// 80-dim input, widths up to 512/1536, 192-dim embeddings.
    pub fn full_scale() -> Self {
        Self {
            input_channels: 80,
            max_front_width: 512,
            max_back_width: 1536,
            max_depth: 4,
            kernel_options: KERNEL_SIZES.to_vec(),
            res2net_scale: 8,
            se_reduction: 4,
            attention_channels: 128,
            block_dilations: vec![2, 3, 4, 5],
            embedding_dim: 192,
            width_step: 8,
            frames: 300,
            bn_momentum: 0.1,
        }
    }

    /// Desk-scale supernet used for training experiments.
    pub fn toy() -> Self {
        Self {
            input_channels: 16,
            max_front_width: 64,
            max_back_width: 192,
            res2net_scale: 4,
            attention_channels: 16,
            embedding_dim: 32,
            width_step: 4,
            frames: 64,
            ..Self::full_scale()
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 || self.embedding_dim == 0 || self.attention_channels == 0 {
            return bad("input channels, attention channels and embedding size must be positive".into());
        }
        if self.max_depth == 0 || self.block_dilations.len() != self.max_depth {
            return bad(format!(
                "{} block dilations for max depth {}",
                self.block_dilations.len(),
                self.max_depth
            ));
        }
        if self.res2net_scale < 2 {
            return bad("res2net scale must be at least 2".into());
        }
        for w in [self.max_front_width, self.max_back_width] {
            if w == 0 || w % self.res2net_scale != 0 {
                return bad(format!("width {w} not divisible by res2net scale {}", self.res2net_scale));
            }
        }
        if self.width_step == 0 || self.width_step % self.res2net_scale != 0 {
            return bad(format!(
                "width step {} must be a multiple of the res2net scale {}",
                self.width_step, self.res2net_scale
            ));
        }
        if self.se_reduction == 0 || self.max_front_width / self.se_reduction == 0 {
            return bad("SE bottleneck would be empty".into());
        }
        if self.kernel_options.is_empty()
            || self.kernel_options.iter().any(|k| !KERNEL_SIZES.contains(k))
            || !self.kernel_options.contains(&MAX_KERNEL)
        {
            return bad(format!("kernel options {:?} must be a subset of {{1,3,5}} containing 5", self.kernel_options));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("batch-norm momentum must lie in [0,1]".into());
        }
        Ok(())
    }

    /// Coarse search space of this supernet for `stage`.
    pub fn space(&self, stage: Stage) -> Result<SpaceConfig> {
        SpaceConfig::coarse(self.max_front_width, self.max_back_width, self.width_step, stage)
    }

    pub fn largest(&self) -> SubnetSpec {
        SubnetSpec::uniform(self.max_depth, MAX_KERNEL, self.max_front_width, self.max_back_width)
    }

    pub fn se_width(&self, c1: usize) -> usize {
        c1 / self.se_reduction
    }

    /// Structural check of a spec against this supernet's capacity.
    pub fn check_spec(&self, spec: &SubnetSpec) -> Result<()> {
        let v = |x: Violation| Err(Error::InvalidSpec(x));
        if spec.depth == 0 || spec.depth > self.max_depth {
            return v(Violation::Depth { depth: spec.depth });
        }
        let n = spec.depth + 1;
        if spec.kernels.len() != n {
            return v(Violation::KernelCount {
                expected: n,
                found: spec.kernels.len(),
            });
        }
        if spec.widths_front.len() != n {
            return v(Violation::WidthCount {
                expected: n,
                found: spec.widths_front.len(),
            });
        }
        for (position, &kernel) in spec.kernels.iter().enumerate() {
            if !self.kernel_options.contains(&kernel) {
                return v(Violation::Kernel { position, kernel });
            }
        }
        for (position, &width) in spec.widths_front.iter().enumerate() {
            let divisible = position == 0 || width % self.res2net_scale == 0;
            if width == 0 || width > self.max_front_width || !divisible {
                return v(Violation::FrontWidth { position, width });
            }
        }
        if self.se_width(spec.widths_front[0]) == 0 {
            return v(Violation::FrontWidth {
                position: 0,
                width: spec.widths_front[0],
            });
        }
        if spec.width_back == 0 || spec.width_back > self.max_back_width {
            return v(Violation::BackWidth { width: spec.width_back });
        }
        Ok(())
    }
}

/// Batch statistics seen by one batch norm, with the buffer indices they
/// belong to (in concatenation order).
#[derive(Clone, Debug, PartialEq)]
pub struct BnObservation {
    pub name: String,
    pub segments: Vec<Range<usize>>,
    pub stats: BatchStats,
}

pub struct ForwardOutput {
    pub embedding: Var,
    pub bn: Vec<BnObservation>,
}

/// Shared weights of the supernet plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SupernetWeights {
    pub config: SupernetConfig,
    pub params: ParamStore,
    pub buffers: ParamStore,
}

/// Prefixes of every batch norm, paired with its maximal channel count.
fn bn_layers(config: &SupernetConfig) -> Vec<(String, usize)> {
    let (c1, c3) = (config.max_front_width, config.max_back_width);
    let split = c1 / config.res2net_scale;
    let mut out = vec![("stem.bn".to_string(), c1)];
    for b in 0..config.max_depth {
        out.push((format!("block{b}.in.bn"), c1));
        for j in 1..config.res2net_scale {
            out.push((format!("block{b}.res{j}.bn"), split));
        }
        out.push((format!("block{b}.out.bn"), c1));
    }
    out.push(("pool.att.bn".to_string(), config.attention_channels));
    out.push(("pool.bn".to_string(), 2 * c3));
    out.push(("fc.bn".to_string(), config.embedding_dim));
    out
}

fn running_names(bn: &str) -> (String, String) {
    (format!("{bn}.running_mean"), format!("{bn}.running_var"))
}

/// Builds maximal weights: uniform `±1/sqrt(fan_in)` for weights, zero
/// biases, unit BN scale, identity kernel transforms.
pub fn build(config: &SupernetConfig, seed: u64) -> Result<SupernetWeights> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let (c0, c1, c3) = (config.input_channels, config.max_front_width, config.max_back_width);
    let split = c1 / config.res2net_scale;
    let att = config.attention_channels;
    let mut weight = |params: &mut ParamStore, name: &str, shape: &[usize]| -> Result<()> {
        let fan_in: usize = shape[1..].iter().product();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        params.insert(format!("{name}.weight"), Tensor::new(shape.to_vec(), data)?)?;
        params.insert(format!("{name}.bias"), Tensor::zeros(&shape[..1]))?;
        Ok(())
    };
    let bn = |params: &mut ParamStore, name: &str, n: usize| -> Result<()> {
        params.insert(format!("{name}.gamma"), Tensor::filled(&[n], 1.0))?;
        params.insert(format!("{name}.beta"), Tensor::zeros(&[n]))?;
        Ok(())
    };
    let transforms = |params: &mut ParamStore, name: &str| -> Result<()> {
        params.insert(format!("{name}.kt1"), Tensor::eye(3))?;
        params.insert(format!("{name}.kt2"), Tensor::eye(1))?;
        Ok(())
    };

    weight(&mut params, "stem.conv", &[c1, c0, MAX_KERNEL])?;
    transforms(&mut params, "stem.conv")?;
    bn(&mut params, "stem.bn", c1)?;
    for b in 0..config.max_depth {
        weight(&mut params, &format!("block{b}.in"), &[c1, c1, 1])?;
        bn(&mut params, &format!("block{b}.in.bn"), c1)?;
        for j in 1..config.res2net_scale {
            let name = format!("block{b}.res{j}");
            weight(&mut params, &name, &[split, split, MAX_KERNEL])?;
            transforms(&mut params, &name)?;
            bn(&mut params, &format!("{name}.bn"), split)?;
        }
        weight(&mut params, &format!("block{b}.out"), &[c1, c1, 1])?;
        bn(&mut params, &format!("block{b}.out.bn"), c1)?;
        let r = config.se_width(c1);
        weight(&mut params, &format!("block{b}.se.fc1"), &[r, c1])?;
        weight(&mut params, &format!("block{b}.se.fc2"), &[c1, r])?;
    }
    weight(&mut params, "transform", &[c3, config.max_depth * c1, 1])?;
    weight(&mut params, "pool.att1", &[att, c3, 1])?;
    bn(&mut params, "pool.att.bn", att)?;
    weight(&mut params, "pool.att2", &[c3, att, 1])?;
    bn(&mut params, "pool.bn", 2 * c3)?;
    weight(&mut params, "fc", &[config.embedding_dim, 2 * c3])?;
    bn(&mut params, "fc.bn", config.embedding_dim)?;

    let mut buffers = ParamStore::new();
    for (name, n) in bn_layers(config) {
        let (m, v) = running_names(&name);
        buffers.insert(m, Tensor::zeros(&[n]))?;
        buffers.insert(v, Tensor::filled(&[n], 1.0))?;
    }
    Ok(SupernetWeights {
        config: config.clone(),
        params,
        buffers,
    })
}

/// Applies the kernel transforms to a `[Co, Ci, 5]` kernel: `K=5` is the
/// kernel itself, `K=3` maps the centre three taps through `kt1`, and
/// `K=1` maps the centre tap of that result through `kt2`.
pub fn transform_kernel(full: &Tensor, target: usize, kt1: &Tensor, kt2: &Tensor) -> Result<Tensor> {
    let (co, ci, taps) = full.dims3()?;
    if taps != MAX_KERNEL {
        return Err(Error::shape("transform_kernel", format!("expected 5 taps, got {taps}")));
    }
    if kt1.shape() != [3, 3] || kt2.shape() != [1, 1] {
        return Err(Error::shape(
            "transform_kernel",
            format!("transform matrices {:?} and {:?}", kt1.shape(), kt2.shape()),
        ));
    }
    let mix = |src: &Tensor, m: &Tensor| -> Tensor {
        let k = m.shape()[0];
        let data = src
            .data()
            .chunks(k)
            .flat_map(|row| (0..k).map(move |j| (0..k).map(|l| m.data()[j * k + l] * row[l]).sum::<f64>()))
            .collect();
        Tensor::new(src.shape().to_vec(), data).expect("same shape")
    };
    match target {
        5 => Ok(full.clone()),
        3 => Ok(mix(&full.slice(&[0..co, 0..ci, 1..4])?, kt1)),
        1 => {
            let k3 = mix(&full.slice(&[0..co, 0..ci, 1..4])?, kt1);
            Ok(mix(&k3.slice(&[0..co, 0..ci, 1..2])?, kt2))
        }
        k => Err(Error::InvalidArgument(format!("kernel size {k} is not one of 1, 3, 5"))),
    }
}

/// Forward logic shared by the supernet and exported subnets. Maximal
/// widths are read off the stored arrays, so the same code runs on the
/// full store and on an exported (already sliced) one.
struct Net<'a> {
    config: &'a SupernetConfig,
    buffers: &'a ParamStore,
    mode: BnMode,
    observed: Vec<BnObservation>,
}

impl<'a> Net<'a> {
    fn pslice(&self, tape: &mut Tape, name: &str, ranges: &[Range<usize>]) -> Result<Var> {
        let id = tape.store().id(name)?;
        tape.param_slice(id, ranges)
    }

    /// Leading `[0..n]` slice of a vector parameter.
    fn vector(&self, tape: &mut Tape, name: &str, n: usize) -> Result<Var> {
        self.pslice(tape, name, &[0..n])
    }

    /// Concatenation of several index ranges of a vector parameter.
    fn gathered(&self, tape: &mut Tape, name: &str, segments: &[Range<usize>]) -> Result<Var> {
        if let [only] = segments {
            return self.pslice(tape, name, &[only.clone()]);
        }
        let parts = segments
            .iter()
            .map(|s| self.pslice(tape, name, &[s.clone()]))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&parts, 0)
    }

    /// `[co, ci, k]` kernel of a conv layer, transformed when the stored
    /// kernel is larger than requested.
    fn kernel(&self, tape: &mut Tape, layer: &str, co: usize, ci: usize, k: usize) -> Result<Var> {
        let name = format!("{layer}.weight");
        let taps = tape.store().by_name(&name)?.shape()[2];
        if taps == k {
            return self.pslice(tape, &name, &[0..co, 0..ci, 0..k]);
        }
        if taps != MAX_KERNEL || !KERNEL_SIZES.contains(&k) {
            return Err(Error::InvalidArgument(format!("{layer}: cannot derive kernel {k} from {taps} taps")));
        }
        let centre = self.pslice(tape, &name, &[0..co, 0..ci, 1..4])?;
        let kt1 = tape.store().id(&format!("{layer}.kt1"))?;
        let kt1 = tape.param(kt1);
        let k3 = tape.tap_mix(centre, kt1)?;
        if k == 3 {
            return Ok(k3);
        }
        let c1 = tape.slice(k3, &[0..co, 0..ci, 1..2])?;
        let kt2 = tape.store().id(&format!("{layer}.kt2"))?;
        let kt2 = tape.param(kt2);
        tape.tap_mix(c1, kt2)
    }

    fn batch_norm(&mut self, tape: &mut Tape, x: Var, name: &str, segments: Vec<Range<usize>>) -> Result<Var> {
        let gamma = self.gathered(tape, &format!("{name}.gamma"), &segments)?;
        let beta = self.gathered(tape, &format!("{name}.beta"), &segments)?;
        let gather = |buf: &Tensor| -> Vec<f64> { segments.iter().flat_map(|s| buf.data()[s.clone()].to_vec()).collect() };
        let (mn, vn) = running_names(name);
        let running = (gather(self.buffers.by_name(&mn)?), gather(self.buffers.by_name(&vn)?));
        let (y, stats) = tape.batch_norm(x, gamma, beta, self.mode, Some((&running.0, &running.1)))?;
        if let Some(stats) = stats {
            self.observed.push(BnObservation {
                name: name.to_string(),
                segments,
                stats,
            });
        }
        Ok(y)
    }

    /// conv → ReLU → BN with leading-index slices.
    #[allow(clippy::too_many_arguments)]
    fn conv_relu_bn(
        &mut self,
        tape: &mut Tape,
        x: Var,
        layer: &str,
        bn: &str,
        co: usize,
        ci: usize,
        k: usize,
        dilation: usize,
    ) -> Result<Var> {
        let w = self.kernel(tape, layer, co, ci, k)?;
        let b = self.vector(tape, &format!("{layer}.bias"), co)?;
        let y = tape.conv1d(x, w, Some(b), dilation, 1)?;
        let y = tape.relu(y);
        self.batch_norm(tape, y, bn, vec![0..co])
    }

    fn dense(&self, tape: &mut Tape, x: Var, layer: &str, out: usize, inp: usize) -> Result<Var> {
        let w = self.pslice(tape, &format!("{layer}.weight"), &[0..out, 0..inp])?;
        let b = self.vector(tape, &format!("{layer}.bias"), out)?;
        tape.linear(x, w, Some(b))
    }

    fn block(&mut self, tape: &mut Tape, x: Var, index: usize, c1: usize, c2: usize, k: usize) -> Result<Var> {
        let p = format!("block{index}");
        let dilation = self.config.block_dilations[index];
        let scale = self.config.res2net_scale;
        let split = c2 / scale;
        let (_, _, t) = tape.value(x).dims3()?;
        let batch = tape.value(x).shape()[0];

        let u = self.conv_relu_bn(tape, x, &format!("{p}.in"), &format!("{p}.in.bn"), c2, c1, 1, 1)?;
        let mut ys = Vec::with_capacity(scale);
        let mut prev: Option<Var> = None;
        for j in 0..scale {
            let xj = tape.slice(u, &[0..batch, j * split..(j + 1) * split, 0..t])?;
            if j == 0 {
                ys.push(xj);
                continue;
            }
            let input = match prev {
                Some(p) => tape.add(xj, p)?,
                None => xj,
            };
            let layer = format!("{p}.res{j}");
            let y = self.conv_relu_bn(tape, input, &layer, &format!("{layer}.bn"), split, split, k, dilation)?;
            ys.push(y);
            prev = Some(y);
        }
        let cat = tape.concat(&ys, 1)?;
        let o = self.conv_relu_bn(tape, cat, &format!("{p}.out"), &format!("{p}.out.bn"), c1, c2, 1, 1)?;

        let r = self.config.se_width(c1);
        let m = tape.mean_time(o)?;
        let z = self.dense(tape, m, &format!("{p}.se.fc1"), r, c1)?;
        let z = tape.relu(z);
        let s = self.dense(tape, z, &format!("{p}.se.fc2"), c1, r)?;
        let s = tape.sigmoid(s);
        let o = tape.scale_channels(o, s)?;
        tape.add(o, x)
    }

    fn forward(&mut self, tape: &mut Tape, spec: &SubnetSpec, x: Var) -> Result<Var> {
        self.config.check_spec(spec)?;
        let (_, c0, _) = tape.value(x).dims3()?;
        if c0 != self.config.input_channels {
            return Err(Error::shape(
                "supernet",
                format!("input has {c0} channels, expected {}", self.config.input_channels),
            ));
        }
        let c1_max = tape.store().by_name("stem.conv.weight")?.shape()[0];
        let c3_max = tape.store().by_name("transform.weight")?.shape()[0];
        let (c1, c3) = (spec.widths_front[0], spec.width_back);
        let (e, att) = (self.config.embedding_dim, self.config.attention_channels);

        let mut h = self.conv_relu_bn(tape, x, "stem.conv", "stem.bn", c1, c0, spec.kernels[0], 1)?;
        let mut outs = Vec::with_capacity(spec.depth);
        for b in 0..spec.depth {
            h = self.block(tape, h, b, c1, spec.widths_front[b + 1], spec.kernels[b + 1])?;
            outs.push(h);
        }
        let cat = tape.concat(&outs, 1)?;

        let cols: Vec<Var> = (0..spec.depth)
            .map(|b| self.pslice(tape, "transform.weight", &[0..c3, b * c1_max..b * c1_max + c1, 0..1]))
            .collect::<Result<_>>()?;
        let w6 = tape.concat(&cols, 1)?;
        let b6 = self.vector(tape, "transform.bias", c3)?;
        let v6 = tape.conv1d(cat, w6, Some(b6), 1, 1)?;
        let v6 = tape.relu(v6);

        let a = self.conv_relu_bn(tape, v6, "pool.att1", "pool.att.bn", att, c3, 1, 1)?;
        let a = tape.tanh(a);
        let wa = self.pslice(tape, "pool.att2.weight", &[0..c3, 0..att, 0..1])?;
        let ba = self.vector(tape, "pool.att2.bias", c3)?;
        let logits = tape.conv1d(a, wa, Some(ba), 1, 1)?;
        let pooled = tape.attentive_stats(v6, logits)?;
        let stat_segments = vec![0..c3, c3_max..c3_max + c3];
        let pooled = self.batch_norm(tape, pooled, "pool.bn", stat_segments.clone())?;

        let wf: Vec<Var> = stat_segments
            .iter()
            .map(|s| self.pslice(tape, "fc.weight", &[0..e, s.clone()]))
            .collect::<Result<_>>()?;
        let wf = tape.concat(&wf, 1)?;
        let bf = self.vector(tape, "fc.bias", e)?;
        let emb = tape.linear(pooled, wf, Some(bf))?;
        self.batch_norm(tape, emb, "fc.bn", vec![0..e])
    }
}

fn run_forward(
    config: &SupernetConfig,
    buffers: &ParamStore,
    tape: &mut Tape,
    spec: &SubnetSpec,
    x: Var,
    mode: BnMode,
) -> Result<ForwardOutput> {
    let mut net = Net {
        config,
        buffers,
        mode,
        observed: Vec::new(),
    };
    let embedding = net.forward(tape, spec, x)?;
    Ok(ForwardOutput {
        embedding,
        bn: net.observed,
    })
}

fn write_running(buffers: &mut ParamStore, name: &str, segments: &[Range<usize>], mean: &[f64], var: &[f64], momentum: f64) -> Result<()> {
    let (mn, vn) = running_names(name);
    for (buf, values) in [(mn, mean), (vn, var)] {
        let id = buffers.id(&buf)?;
        let data = buffers.get_mut(id).data_mut();
        let mut k = 0;
        for s in segments {
            let len = s.len();
            ema_update(&mut data[s.clone()], &values[k..k + len], momentum);
            k += len;
        }
    }
    Ok(())
}

impl SupernetWeights {
    /// Records the active path of `spec` on `tape`; the tape must read
    /// from `self.params`.
    pub fn forward_on_tape(&self, tape: &mut Tape, spec: &SubnetSpec, x: Var, mode: BnMode) -> Result<ForwardOutput> {
        run_forward(&self.config, &self.buffers, tape, spec, x, mode)
    }

    /// Embeddings `[B, E]` of a `[B, C0, T]` batch. Pure: running
    /// statistics are not updated here.
    pub fn forward(&self, spec: &SubnetSpec, batch: &Tensor, mode: BnMode) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(batch.clone());
        let out = self.forward_on_tape(&mut tape, spec, x, mode)?;
        Ok(tape.value(out.embedding).clone())
    }

    /// Exponential moving-average update of the running statistics seen in
    /// a train-mode forward. Only the observed channels move.
    pub fn update_running_stats(&mut self, observed: &[BnObservation], momentum: f64) -> Result<()> {
        for o in observed {
            write_running(&mut self.buffers, &o.name, &o.segments, &o.stats.mean, &o.stats.var, momentum)?;
        }
        Ok(())
    }

    /// Recomputes the running statistics of every batch norm on the
    /// active path of `spec` from the first `n_utterances` items of `data`
    /// (`[N, C0, T]`), as batch-size-weighted averages of per-batch
    /// statistics. Statistics of inactive channels are untouched.
    pub fn recalibrate_bn(&mut self, spec: &SubnetSpec, data: &Tensor, n_utterances: usize, batch_size: usize) -> Result<()> {
        let (n, c, t) = data.dims3()?;
        if n < n_utterances {
            return Err(Error::InsufficientData {
                needed: n_utterances,
                available: n,
            });
        }
        if batch_size == 0 || n_utterances == 0 {
            return Err(Error::InvalidArgument("recalibration needs a positive batch size and utterance count".into()));
        }
        let mut sums: BTreeMap<String, (Vec<Range<usize>>, Vec<f64>, Vec<f64>, f64)> = BTreeMap::new();
        let mut order = Vec::new();
        let mut start = 0;
        while start < n_utterances {
            let end = (start + batch_size).min(n_utterances);
            let batch = data.slice(&[start..end, 0..c, 0..t])?;
            let weight = (end - start) as f64;
            let mut tape = Tape::new(&self.params);
            let x = tape.constant(batch);
            let out = self.forward_on_tape(&mut tape, spec, x, BnMode::Train)?;
            for o in out.bn {
                let entry = sums.entry(o.name.clone()).or_insert_with(|| {
                    order.push(o.name.clone());
                    let len = o.stats.mean.len();
                    (o.segments.clone(), vec![0.0; len], vec![0.0; len], 0.0)
                });
                for (s, m) in entry.1.iter_mut().zip(&o.stats.mean) {
                    *s += weight * m;
                }
                for (s, v) in entry.2.iter_mut().zip(&o.stats.var) {
                    *s += weight * v;
                }
                entry.3 += weight;
            }
            start = end;
        }
        for name in order {
            let (segments, mean, var, total) = &sums[&name];
            let mean: Vec<f64> = mean.iter().map(|m| m / total).collect();
            let var: Vec<f64> = var.iter().map(|v| v / total).collect();
            if !mean.iter().chain(&var).all(|x| x.is_finite()) {
                return Err(Error::NonFinite {
                    batch: 0,
                    spec: format!("{spec} (recalibrating {name})"),
                });
            }
            write_running(&mut self.buffers, &name, segments, &mean, &var, 1.0)?;
        }
        Ok(())
    }

    /// Materializes the active weights of `spec` with transformed kernels.
    pub fn export_subnet(&self, spec: &SubnetSpec) -> Result<ExportedSubnet> {
        self.config.check_spec(spec)?;
        let cfg = &self.config;
        let (c0, c1, c3) = (cfg.input_channels, spec.widths_front[0], spec.width_back);
        let (c1_max, c3_max) = (cfg.max_front_width, cfg.max_back_width);
        let (e, att) = (cfg.embedding_dim, cfg.attention_channels);
        let net = Net {
            config: cfg,
            buffers: &self.buffers,
            mode: BnMode::Eval,
            observed: Vec::new(),
        };
        let mut tape = Tape::new(&self.params);
        let mut params = ParamStore::new();
        let mut norms: Vec<(String, Vec<Range<usize>>)> = Vec::new();

        // (layer, out, in, kernel) of every conv with a leading-slice weight
        let mut convs = vec![("stem.conv".to_string(), c1, c0, spec.kernels[0])];
        norms.push(("stem.bn".into(), vec![0..c1]));
        let mut dense = Vec::new();
        for b in 0..spec.depth {
            let c2 = spec.widths_front[b + 1];
            let split = c2 / cfg.res2net_scale;
            convs.push((format!("block{b}.in"), c2, c1, 1));
            norms.push((format!("block{b}.in.bn"), vec![0..c2]));
            for j in 1..cfg.res2net_scale {
                convs.push((format!("block{b}.res{j}"), split, split, spec.kernels[b + 1]));
                norms.push((format!("block{b}.res{j}.bn"), vec![0..split]));
            }
            convs.push((format!("block{b}.out"), c1, c2, 1));
            norms.push((format!("block{b}.out.bn"), vec![0..c1]));
            let r = cfg.se_width(c1);
            dense.push((format!("block{b}.se.fc1"), r, c1));
            dense.push((format!("block{b}.se.fc2"), c1, r));
        }
        convs.push(("pool.att1".into(), att, c3, 1));
        convs.push(("pool.att2".into(), c3, att, 1));
        norms.push(("pool.att.bn".into(), vec![0..att]));
        let stat_segments = vec![0..c3, c3_max..c3_max + c3];
        norms.push(("pool.bn".into(), stat_segments.clone()));
        norms.push(("fc.bn".into(), vec![0..e]));

        for (layer, co, ci, k) in &convs {
            let w = net.kernel(&mut tape, layer, *co, *ci, *k)?;
            params.insert(format!("{layer}.weight"), tape.value(w).clone())?;
            params.insert(format!("{layer}.bias"), self.params.by_name(&format!("{layer}.bias"))?.slice(&[0..*co])?)?;
        }
        for (layer, o, i) in &dense {
            params.insert(format!("{layer}.weight"), self.params.by_name(&format!("{layer}.weight"))?.slice(&[0..*o, 0..*i])?)?;
            params.insert(format!("{layer}.bias"), self.params.by_name(&format!("{layer}.bias"))?.slice(&[0..*o])?)?;
        }
        let w6 = self.params.by_name("transform.weight")?;
        let cols = (0..spec.depth)
            .map(|b| w6.slice(&[0..c3, b * c1_max..b * c1_max + c1, 0..1]))
            .collect::<Result<Vec<_>>>()?;
        params.insert("transform.weight", Tensor::concat(&cols.iter().collect::<Vec<_>>(), 1)?)?;
        params.insert("transform.bias", self.params.by_name("transform.bias")?.slice(&[0..c3])?)?;
        let fc = self.params.by_name("fc.weight")?;
        let parts = stat_segments
            .iter()
            .map(|s| fc.slice(&[0..e, s.clone()]))
            .collect::<Result<Vec<_>>>()?;
        params.insert("fc.weight", Tensor::concat(&parts.iter().collect::<Vec<_>>(), 1)?)?;
        params.insert("fc.bias", self.params.by_name("fc.bias")?.clone())?;

        let gather = |t: &Tensor, segs: &[Range<usize>]| -> Result<Tensor> {
            let data: Vec<f64> = segs.iter().flat_map(|s| t.data()[s.clone()].to_vec()).collect();
            Tensor::new(vec![data.len()], data)
        };
        let mut buffers = ParamStore::new();
        for (name, segs) in norms {
            for suffix in ["gamma", "beta"] {
                let key = format!("{name}.{suffix}");
                params.insert(key.clone(), gather(self.params.by_name(&key)?, &segs)?)?;
            }
            let (mn, vn) = running_names(&name);
            buffers.insert(mn.clone(), gather(self.buffers.by_name(&mn)?, &segs)?)?;
            buffers.insert(vn.clone(), gather(self.buffers.by_name(&vn)?, &segs)?)?;
        }
        Ok(ExportedSubnet {
            spec: spec.clone(),
            config: cfg.clone(),
            params,
            buffers,
        })
    }
}

/// A standalone subnet: sliced weights, materialized kernels, no kernel
/// transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedSubnet {
    pub spec: SubnetSpec,
    pub config: SupernetConfig,
    pub params: ParamStore,
    pub buffers: ParamStore,
}

impl ExportedSubnet {
    /// Eval-mode embeddings of a `[B, C0, T]` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(batch.clone());
        let out = run_forward(&self.config, &self.buffers, &mut tape, &self.spec, x, BnMode::Eval)?;
        Ok(tape.value(out.embedding).clone())
    }

    /// Number of trainable scalars (weights, biases, BN affine).
    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }
}
