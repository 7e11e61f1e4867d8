//! End-to-end pipelines: train, evaluate subnets, collect records, fit the
//! predictor and search.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, supernet_checkpoint, Checkpoint};
use super::dataset::{generate_dataset, Dataset, SyntheticDatasetConfig};
use super::formats::{CollectedRecord, RecalibrationEvent};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, extract_segments, mean_pair_cosine, Metrics};
use crate::numerics::Tensor;
use crate::predictor::{predict, train_predictor, AccuracyRecord, Metric, PredictorConfig, PredictorModel, PredictorReport};
use crate::searcher::{mpea, spec_cost, Constraint, CostMetric, EvolutionConfig, SearchResult};
use crate::space::{sample_subnet, SamplerState, SpaceConfig, Stage, SubnetSpec};
use crate::supernet::{build, SupernetConfig, SupernetWeights};
use crate::trainer::{progressive_train, AugmentPolicy, StageReport, StageSchedule, TrainConfig};

/// How subnets are scored on the trial list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub segment_frames: usize,
    pub segments_per_utterance: usize,
    /// Training utterances used to recalibrate batch norm.
    pub recalibration_utterances: usize,
    pub recalibration_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            segment_frames: 48,
            segments_per_utterance: 3,
            recalibration_utterances: 128,
            recalibration_batch: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub n_records: usize,
    pub seed: u64,
    /// Share of the records held out to validate the predictor.
    pub validation_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub metric: CostMetric,
    pub budget: f64,
    pub frames: usize,
    pub evolution: EvolutionConfig,
}

/// Everything the end-to-end pipeline needs. Defaults describe the toy
/// setup used for desktop experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset: SyntheticDatasetConfig,
    pub supernet: SupernetConfig,
    /// Seed of the supernet initialization.
    pub init_seed: u64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub collect: CollectConfig,
    pub predictor: PredictorConfig,
    pub predictor_metric: Metric,
    pub search: SearchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let supernet = SupernetConfig::toy();
        Self {
            dataset: SyntheticDatasetConfig {
                n_speakers: 128,
                feature_dim: 16,
                frames: 64,
                ..SyntheticDatasetConfig::default()
            },
            init_seed: 0,
            train: TrainConfig {
                epochs_per_stage: 8,
                cycle_epochs: 8,
                lr_max: 5e-3,
                batch_size: 32,
                segment_frames_largest: 48,
                segment_frames: 48,
                augment: AugmentPolicy {
                    noise_std: Some(0.1),
                    time_mask_max: Some(8),
                    freq_mask_max: Some(2),
                    allow_identity: true,
                },
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            collect: CollectConfig {
                n_records: 60,
                seed: 0,
                validation_fraction: 0.2,
            },
            predictor: PredictorConfig::default(),
            predictor_metric: Metric::Eer,
            search: SearchConfig {
                metric: CostMetric::Macs,
                budget: 3e6,
                frames: 64,
                evolution: EvolutionConfig::default(),
            },
            supernet,
        }
    }
}

impl PipelineConfig {
    pub fn check(&self) -> Result<()> {
        self.dataset.check()?;
        self.supernet.check()?;
        self.train.check()?;
        self.search.evolution.check()?;
        if self.dataset.feature_dim != self.supernet.input_channels {
            return Err(Error::Config(format!(
                "dataset feature_dim {} differs from supernet input_channels {}",
                self.dataset.feature_dim, self.supernet.input_channels
            )));
        }
        if !(0.0..1.0).contains(&self.collect.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn space(&self, stage: Stage) -> Result<SpaceConfig> {
        self.supernet.space(stage)
    }
}

pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("supernet-{}.ckpt", stage.name()))
}

/// Progressive training from a fresh initialization, or from a checkpoint
/// whose stage tag says which stages are already done. Training stops after
/// `stop_after` when given. When `out_dir` is given, one checkpoint per
/// completed stage is written there.
pub fn train_supernet(
    cfg: &PipelineConfig,
    dataset: &Dataset,
    resume: Option<&Checkpoint>,
    stop_after: Option<Stage>,
    out_dir: Option<&Path>,
) -> Result<(SupernetWeights, Vec<StageReport>)> {
    cfg.check()?;
    let (mut weights, done) = match resume {
        None => (build(&cfg.supernet, cfg.init_seed)?, None),
        Some(ck) => {
            let weights = super::checkpoint::supernet_from_checkpoint(ck)?;
            if weights.config != cfg.supernet {
                return Err(Error::Config("checkpoint supernet config differs from the pipeline config".into()));
            }
            let done = ck
                .stage
                .ok_or_else(|| Error::Config("checkpoint carries no stage tag to resume from".into()))?;
            (weights, Some(done))
        }
    };
    let last = stop_after.unwrap_or(Stage::Width2);
    let stages: Vec<Stage> = Stage::ALL
        .iter()
        .copied()
        .filter(|s| done.is_none_or(|d| *s > d) && *s <= last)
        .collect();
    if stages.is_empty() {
        return Err(Error::Config("no stage left to train".into()));
    }
    let schedule = StageSchedule::from_stages(&cfg.supernet, &stages)?;
    let reports = progressive_train(&mut weights, &schedule, &cfg.train, &dataset.train, |report, w| {
        if let Some(dir) = out_dir {
            let mut ck = supernet_checkpoint(w, Some(report.stage))?;
            ck.set_config("train", &cfg.train)?;
            ck.metadata.insert("final_loss".into(), serde_json::Value::from(report.epoch_losses.last().copied()));
            save_checkpoint(&ck, &checkpoint_path(dir, report.stage))?;
        }
        Ok(())
    })?;
    Ok((weights, reports))
}

/// Embeddings `[N * segments, E]` of every evaluation utterance.
fn embed_eval_set(weights: &SupernetWeights, spec: &SubnetSpec, dataset: &Dataset, eval: &EvalConfig) -> Result<Tensor> {
    let subnet = weights.export_subnet(spec)?;
    let n = dataset.eval.ids.len();
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        parts.push(extract_segments(&dataset.eval.utterance(i)?, eval.segment_frames, eval.segments_per_utterance)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    subnet.forward(&Tensor::concat(&refs, 0)?)
}

/// Trial scores of `spec` with the running statistics currently stored in
/// `weights` (no recalibration).
pub fn score_trials(weights: &SupernetWeights, spec: &SubnetSpec, dataset: &Dataset, eval: &EvalConfig) -> Result<Vec<f64>> {
    let emb = embed_eval_set(weights, spec, dataset, eval)?;
    let (_, e) = emb.dims2()?;
    let k = eval.segments_per_utterance;
    let rows = |i: usize| emb.slice(&[i * k..(i + 1) * k, 0..e]);
    dataset
        .trials
        .iter()
        .map(|t| {
            let a = dataset.eval.index(&t.a).ok_or_else(|| Error::InvalidArgument(format!("unknown utterance {}", t.a)))?;
            let b = dataset.eval.index(&t.b).ok_or_else(|| Error::InvalidArgument(format!("unknown utterance {}", t.b)))?;
            mean_pair_cosine(&rows(a)?, &rows(b)?)
        })
        .collect()
}

/// Recalibrates batch norm of `spec` on training data, then scores the
/// trial list. `weights` is left untouched.
pub fn evaluate_subnet(
    weights: &SupernetWeights,
    spec: &SubnetSpec,
    dataset: &Dataset,
    eval: &EvalConfig,
) -> Result<(Metrics, RecalibrationEvent)> {
    let mut w = weights.clone();
    let utterances = eval.recalibration_utterances.min(dataset.train.len());
    w.recalibrate_bn(spec, &dataset.train.features, utterances, eval.recalibration_batch)?;
    let bn_layers = w
        .buffers
        .iter()
        .zip(weights.buffers.iter())
        .filter(|((_, name, new), (_, _, old))| name.ends_with(".running_mean") && new != old)
        .count();
    let scores = score_trials(&w, spec, dataset, eval)?;
    let labels: Vec<bool> = dataset.trials.iter().map(|t| t.target).collect();
    let metrics = evaluate(&scores, &labels)?;
    Ok((
        metrics,
        RecalibrationEvent {
            utterances,
            batch_size: eval.recalibration_batch,
            bn_layers,
        },
    ))
}

/// Samples `n_records` specs from `space` and measures each one.
pub fn collect_records(
    weights: &SupernetWeights,
    space: &SpaceConfig,
    dataset: &Dataset,
    eval: &EvalConfig,
    n_records: usize,
    seed: u64,
) -> Result<Vec<CollectedRecord>> {
    let mut sampler = SamplerState::new(seed);
    (0..n_records)
        .map(|_| {
            let spec = sample_subnet(space, &mut sampler);
            let (m, event) = evaluate_subnet(weights, &spec, dataset, eval)?;
            Ok(CollectedRecord {
                record: AccuracyRecord::new(&spec, space, m.eer, m.min_dcf)?,
                recalibration: Some(event),
            })
        })
        .collect()
}

/// Splits off the last `fraction` of the records for validation and trains.
pub fn fit_predictor(
    records: &[AccuracyRecord],
    space: &SpaceConfig,
    metric: Metric,
    cfg: &PredictorConfig,
    validation_fraction: f64,
) -> Result<(PredictorModel, PredictorReport)> {
    let n_val = (records.len() as f64 * validation_fraction).floor() as usize;
    let (train, val) = records.split_at(records.len() - n_val);
    train_predictor(train, val, space, metric, cfg)
}

/// MPEA guided by the predictor under a real cost constraint.
pub fn predictor_search(
    model: &PredictorModel,
    supernet: &SupernetConfig,
    search: &SearchConfig,
) -> Result<SearchResult> {
    let constraint = Constraint::new(search.metric, search.budget, search.frames)?;
    let space = model.space.clone();
    let cost = |s: &SubnetSpec| spec_cost(s, &constraint, supernet, None);
    let mut accuracy = |s: &SubnetSpec| predict(model, s, &space);
    mpea(&space, &mut accuracy, &constraint, &cost, &search.evolution)
}

/// Artifacts of one end-to-end run.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub dataset: Dataset,
    pub weights: SupernetWeights,
    pub stage_reports: Vec<StageReport>,
    pub records: Vec<CollectedRecord>,
    pub predictor: PredictorModel,
    pub predictor_report: PredictorReport,
    pub search: SearchResult,
}

/// generate → train → collect records → predictor → search.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineOutput> {
    cfg.check()?;
    let dataset = generate_dataset(&cfg.dataset)?;
    let (weights, stage_reports) = train_supernet(cfg, &dataset, None, None, out_dir)?;
    let space = cfg.space(Stage::Width2)?;
    let records = collect_records(&weights, &space, &dataset, &cfg.eval, cfg.collect.n_records, cfg.collect.seed)?;
    let plain: Vec<AccuracyRecord> = records.iter().map(|r| r.record.clone()).collect();
    let (predictor, predictor_report) =
        fit_predictor(&plain, &space, cfg.predictor_metric, &cfg.predictor, cfg.collect.validation_fraction)?;
    let search = predictor_search(&predictor, &cfg.supernet, &cfg.search)?;
    Ok(PipelineOutput {
        dataset,
        weights,
        stage_reports,
        records,
        predictor,
        predictor_report,
        search,
    })
}
