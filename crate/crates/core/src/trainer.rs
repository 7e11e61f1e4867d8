//! Progressive training of the supernet.
//!
//! [`progressive_train`] walks the stages largest → kernel → depth →
//! width1 → width2, widening the sampling space at each entry, and runs
//! [`dynamic_path_train`] inside every stage: per batch one augmentation is
//! drawn, `M` subnets are sampled, their AAM-softmax gradients are summed
//! and a single masked Adam step is applied.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, BnMode, ParamGrads, Tape, Tensor, Var};
use crate::space::{sample_subnet, space_size, SamplerState, SpaceConfig, Stage, SubnetSpec};
use crate::supernet::{SupernetConfig, SupernetWeights};

/// Name of the classification head inside the supernet parameter store.
pub const HEAD: &str = "head.class_weights";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Standard deviation of additive Gaussian noise, if enabled.
    pub noise_std: Option<f64>,
    /// Largest time mask in frames, if enabled.
    pub time_mask_max: Option<usize>,
    /// Largest frequency mask in channels, if enabled.
    pub freq_mask_max: Option<usize>,
    /// Whether "no augmentation" is one of the choices.
    pub allow_identity: bool,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            noise_std: None,
            time_mask_max: None,
            freq_mask_max: None,
            allow_identity: true,
        }
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            noise_std: Some(0.1),
            time_mask_max: Some(8),
            freq_mask_max: Some(4),
            allow_identity: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_per_stage: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycle_epochs: usize,
    /// Paths sampled per batch (`M`).
    pub paths_per_step: usize,
    pub batch_size: usize,
    /// Segment length in the largest stage.
    pub segment_frames_largest: usize,
    /// Segment length in every later stage.
    pub segment_frames: usize,
    pub aam_margin: f64,
    pub aam_scale: f64,
    pub augment: AugmentPolicy,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_stage: 64,
            lr_min: 1e-8,
            lr_max: 1e-3,
            cycle_epochs: 16,
            paths_per_step: 1,
            batch_size: 128,
            segment_frames_largest: 200,
            segment_frames: 300,
            aam_margin: 0.2,
            aam_scale: 30.0,
            augment: AugmentPolicy::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return bad("learning rates must satisfy 0 < lr_min < lr_max");
        }
        if self.cycle_epochs == 0 || self.cycle_epochs % 2 != 0 {
            return bad("cycle_epochs must be a positive even number");
        }
        if self.paths_per_step == 0 {
            return bad("paths_per_step must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for batch statistics");
        }
        if self.segment_frames == 0 || self.segment_frames_largest == 0 {
            return bad("segment lengths must be positive");
        }
        if !(self.aam_scale > 0.0) || !self.aam_margin.is_finite() || self.aam_margin < 0.0 {
            return bad("AAM scale must be positive and margin non-negative");
        }
        Ok(())
    }

    pub fn segment_for(&self, stage: Stage) -> usize {
        if stage == Stage::Largest {
            self.segment_frames_largest
        } else {
            self.segment_frames
        }
    }
}

/// Labeled utterance features `[N, C0, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledFeatures {
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let (n, _, t) = features.dims3()?;
        if labels.len() != n {
            return Err(Error::shape("labeled features", format!("{} labels for {n} utterances", labels.len())));
        }
        if t == 0 || n == 0 {
            return Err(Error::InvalidArgument("dataset has no frames".into()));
        }
        if let Some(bad) = labels.iter().find(|y| **y >= n_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Crops `frames` frames from each listed utterance at random offsets
    /// (whole utterance when it is not longer than `frames`).
    fn crop(&self, indices: &[usize], frames: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
        let (_, c, t) = self.features.dims3()?;
        let len = frames.min(t);
        let mut data = Vec::with_capacity(indices.len() * c * len);
        for &i in indices {
            let start = rng.gen_range(0..=t - len);
            for ch in 0..c {
                let row = (i * c + ch) * t + start;
                data.extend_from_slice(&self.features.data()[row..row + len]);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(vec![indices.len(), c, len], data)?, labels))
    }
}

/// Ordered stages with the sampling space each one uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    stages: Vec<(Stage, SpaceConfig)>,
}

impl StageSchedule {
    /// Rejects schedules whose spaces are not nested in order.
    pub fn new(stages: Vec<(Stage, SpaceConfig)>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("schedule has no stages".into()));
        }
        for (stage, space) in &stages {
            space.check()?;
            if space.stage != *stage {
                return Err(Error::Config(format!("space for `{stage}` is tagged `{}`", space.stage)));
            }
        }
        for pair in stages.windows(2) {
            if pair[0].0 == pair[1].0 || !pair[0].1.is_subspace_of(&pair[1].1) {
                return Err(Error::Config(format!(
                    "stage `{}` space is not contained in the following stage `{}`",
                    pair[0].0, pair[1].0
                )));
            }
        }
        Ok(Self { stages })
    }

    /// All five stages over the supernet's coarse spaces.
    pub fn full(config: &SupernetConfig) -> Result<Self> {
        Self::from_stages(config, &Stage::ALL)
    }

    pub fn from_stages(config: &SupernetConfig, stages: &[Stage]) -> Result<Self> {
        let list = stages
            .iter()
            .map(|s| Ok((*s, config.space(*s)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(list)
    }

    /// The stages that follow `done`.
    pub fn resume_after(config: &SupernetConfig, done: Stage) -> Result<Self> {
        let rest: Vec<Stage> = Stage::ALL.iter().copied().filter(|s| *s > done).collect();
        if rest.is_empty() {
            return Err(Error::Config(format!("nothing left to train after `{done}`")));
        }
        Self::from_stages(config, &rest)
    }

    pub fn stages(&self) -> &[(Stage, SpaceConfig)] {
        &self.stages
    }
}

/// Triangular cyclic learning rate; `epoch` is measured from the start of
/// the current stage and may be fractional.
pub fn cyclic_lr(epoch: f64, config: &TrainConfig) -> f64 {
    let cycle = config.cycle_epochs as f64;
    let half = cycle / 2.0;
    let phase = epoch.rem_euclid(cycle);
    let frac = if phase <= half { phase / half } else { (cycle - phase) / half };
    config.lr_min + (config.lr_max - config.lr_min) * frac
}

/// The transform applied to one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Augmentation {
    Identity,
    Noise { std: f64 },
    TimeMask { start: usize, width: usize },
    FreqMask { start: usize, width: usize },
}

/// Zeroes frames `start..start+width` of every channel.
pub fn time_mask(batch: &Tensor, start: usize, width: usize) -> Result<Tensor> {
    let (_, _, t) = batch.dims3()?;
    let end = (start + width).min(t);
    let mut out = batch.clone();
    for row in out.data_mut().chunks_mut(t) {
        row[start.min(end)..end].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

/// Zeroes channel rows `start..start+width` of every utterance.
pub fn freq_mask(batch: &Tensor, start: usize, width: usize) -> Result<Tensor> {
    let (_, c, t) = batch.dims3()?;
    let end = (start + width).min(c);
    let mut out = batch.clone();
    for (i, row) in out.data_mut().chunks_mut(t).enumerate() {
        if (start..end).contains(&(i % c)) {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Applies one transform chosen uniformly among those enabled by `policy`.
pub fn augment(batch: &Tensor, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<(Tensor, Augmentation)> {
    let (_, c, t) = batch.dims3()?;
    let mut choices = Vec::new();
    if policy.allow_identity {
        choices.push(0);
    }
    if policy.noise_std.is_some() {
        choices.push(1);
    }
    if policy.time_mask_max.is_some_and(|w| w > 0) {
        choices.push(2);
    }
    if policy.freq_mask_max.is_some_and(|w| w > 0) {
        choices.push(3);
    }
    let Some(&choice) = choices.choose(rng) else {
        return Ok((batch.clone(), Augmentation::Identity));
    };
    fn span(rng: &mut ChaCha8Rng, max: usize, len: usize) -> (usize, usize) {
        let width = rng.gen_range(1..=max.min(len));
        (rng.gen_range(0..=len - width), width)
    }
    Ok(match choice {
        1 => {
            let std = policy.noise_std.unwrap_or(0.0);
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("noise std: {e}")))?;
            let mut out = batch.clone();
            out.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
            (out, Augmentation::Noise { std })
        }
        2 => {
            let (start, width) = span(rng, policy.time_mask_max.unwrap_or(1), t);
            (time_mask(batch, start, width)?, Augmentation::TimeMask { start, width })
        }
        3 => {
            let (start, width) = span(rng, policy.freq_mask_max.unwrap_or(1), c);
            (freq_mask(batch, start, width)?, Augmentation::FreqMask { start, width })
        }
        _ => (batch.clone(), Augmentation::Identity),
    })
}

/// AAM-softmax loss on the tape. `class_weights` is `[n_classes, E]`.
pub fn aam_loss_on_tape(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    class_weights: Var,
    margin: f64,
    scale: f64,
) -> Result<Var> {
    let e = tape.row_normalize(embeddings)?;
    let w = tape.row_normalize(class_weights)?;
    let cos = tape.linear(e, w, None)?;
    let logits = tape.angular_margin(cos, labels, margin, scale)?;
    tape.cross_entropy(logits, labels)
}

/// Mean AAM-softmax loss of `[B, E]` embeddings.
pub fn aam_softmax_loss(
    embeddings: &Tensor,
    labels: &[usize],
    class_weights: &Tensor,
    margin: f64,
    scale: f64,
) -> Result<f64> {
    let store = crate::numerics::ParamStore::new();
    let mut tape = Tape::new(&store);
    let e = tape.constant(embeddings.clone());
    let w = tape.constant(class_weights.clone());
    let loss = aam_loss_on_tape(&mut tape, e, labels, w, margin, scale)?;
    Ok(tape.value(loss).item())
}

/// Adds the classification head to the supernet store if it is missing.
pub fn ensure_head(weights: &mut SupernetWeights, n_classes: usize, seed: u64) -> Result<()> {
    let e = weights.config.embedding_dim;
    if let Ok(existing) = weights.params.by_name(HEAD) {
        if existing.shape() != [n_classes, e] {
            return Err(Error::Config(format!(
                "existing head has shape {:?}, dataset needs [{n_classes}, {e}]",
                existing.shape()
            )));
        }
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
    let bound = 1.0 / (e as f64).sqrt();
    let data = (0..n_classes * e).map(|_| rng.gen_range(-bound..bound)).collect();
    weights.params.insert(HEAD, Tensor::new(vec![n_classes, e], data)?)?;
    Ok(())
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    /// Mean loss over the sampled paths.
    pub loss: f64,
    pub augmentation: Augmentation,
    pub specs: Vec<SubnetSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    /// Size of the sampling space at stage entry, in decimal.
    pub space_size: String,
    /// Loss of the first batch, before any update of this stage.
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub records: Vec<TrainRecord>,
}

/// Loss and summed gradients of the sampled paths on one batch.
pub fn path_gradients(
    weights: &mut SupernetWeights,
    specs: &[SubnetSpec],
    batch: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<(Vec<f64>, ParamGrads)> {
    let head = weights.params.id(HEAD)?;
    let momentum = weights.config.bn_momentum;
    let mut total = ParamGrads::default();
    let mut losses = Vec::with_capacity(specs.len());
    for spec in specs {
        let (loss, grads, observed) = {
            let mut tape = Tape::new(&weights.params);
            let x = tape.constant(batch.clone());
            let out = weights.forward_on_tape(&mut tape, spec, x, BnMode::Train)?;
            let w = tape.param(head);
            let loss = aam_loss_on_tape(&mut tape, out.embedding, labels, w, config.aam_margin, config.aam_scale)?;
            let value = tape.value(loss).item();
            let grads = if value.is_finite() { Some(tape.backward(loss)?.params) } else { None };
            (value, grads, out.bn)
        };
        let grads = match grads {
            Some(g) if g.all_finite() => g,
            _ => {
                return Err(Error::NonFinite {
                    batch: 0,
                    spec: spec.to_string(),
                })
            }
        };
        weights.update_running_stats(&observed, momentum)?;
        total.merge(&grads);
        losses.push(loss);
    }
    Ok((losses, total))
}

/// Trains on every batch of `data` for `epochs` epochs, sampling from
/// `space`. Returns the records of every step.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_path_train(
    weights: &mut SupernetWeights,
    space: &SpaceConfig,
    sampler: &mut SamplerState,
    optimizer: &mut Adam,
    config: &TrainConfig,
    data: &LabeledFeatures,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainRecord>> {
    config.check()?;
    ensure_head(weights, data.n_classes, config.seed)?;
    let frames = config.segment_for(space.stage);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let n_batches = data.len() / config.batch_size;
    if n_batches == 0 {
        return Err(Error::InsufficientData {
            needed: config.batch_size,
            available: data.len(),
        });
    }
    let mut records = Vec::with_capacity(epochs * n_batches);
    for epoch in 0..epochs {
        order.shuffle(rng);
        for b in 0..n_batches {
            let idx = &order[b * config.batch_size..(b + 1) * config.batch_size];
            let (segment, labels) = data.crop(idx, frames, rng)?;
            let (batch, augmentation) = augment(&segment, &config.augment, rng)?;
            let specs: Vec<SubnetSpec> = (0..config.paths_per_step).map(|_| sample_subnet(space, sampler)).collect();
            let step = records.len();
            let (losses, grads) = path_gradients(weights, &specs, &batch, &labels, config).map_err(|e| match e {
                Error::NonFinite { spec, .. } => Error::NonFinite { batch: step, spec },
                other => other,
            })?;
            let lr = cyclic_lr(epoch as f64 + b as f64 / n_batches as f64, config);
            optimizer.step(&mut weights.params, &grads, lr);
            records.push(TrainRecord {
                stage: space.stage,
                epoch,
                batch: b,
                lr,
                loss: losses.iter().sum::<f64>() / losses.len() as f64,
                augmentation,
                specs,
            });
        }
    }
    Ok(records)
}

/// Runs every stage of `schedule` in order, calling `on_stage_end` with the
/// weights after each stage (the checkpoint hook). Optimizer moments and
/// the learning-rate phase restart at each stage.
pub fn progressive_train(
    weights: &mut SupernetWeights,
    schedule: &StageSchedule,
    config: &TrainConfig,
    data: &LabeledFeatures,
    mut on_stage_end: impl FnMut(&StageReport, &SupernetWeights) -> Result<()>,
) -> Result<Vec<StageReport>> {
    config.check()?;
    let mut reports = Vec::new();
    for (stage, space) in schedule.stages() {
        let idx = Stage::ALL.iter().position(|s| s == stage).unwrap_or(0) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(idx + 1);
        let mut sampler = SamplerState::new(config.seed.wrapping_add(idx.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut optimizer = Adam::new(config.adam);
        let records = dynamic_path_train(
            weights,
            space,
            &mut sampler,
            &mut optimizer,
            config,
            data,
            config.epochs_per_stage,
            &mut rng,
        )?;
        let per_epoch = records.len() / config.epochs_per_stage.max(1);
        let epoch_losses = records
            .chunks(per_epoch.max(1))
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
            .collect();
        let report = StageReport {
            stage: *stage,
            space_size: space_size(space).to_string(),
            initial_loss: records.first().map_or(f64::NAN, |r| r.loss),
            epoch_losses,
            records,
        };
        on_stage_end(&report, weights)?;
        reports.push(report);
    }
    Ok(reports)
}
