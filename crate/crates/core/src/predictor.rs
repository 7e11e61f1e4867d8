//! Accuracy predictor: a ReLU MLP with three hidden layers of 400 units
//! mapping one-hot subnet encodings to a min-max normalized metric, fitted
//! with Adam on the mean absolute error.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::costmodel::count_macs;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::space::{bounds, encode_onehot, encoding_len, SpaceConfig, SubnetSpec};
use crate::supernet::SupernetConfig;

pub const HIDDEN: usize = 400;
const LAYERS: usize = 4;

/// One evaluated subnet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub encoding: Vec<f64>,
    pub eer: f64,
    pub dcf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SubnetSpec>,
}

impl AccuracyRecord {
    pub fn new(spec: &SubnetSpec, space: &SpaceConfig, eer: f64, dcf: f64) -> Result<Self> {
        let record = Self {
            encoding: encode_onehot(spec, space)?,
            eer,
            dcf,
            spec: Some(spec.clone()),
        };
        record.check(encoding_len(space))?;
        Ok(record)
    }

    pub fn check(&self, encoding_len: usize) -> Result<()> {
        if self.encoding.len() != encoding_len {
            return Err(Error::shape(
                "accuracy record",
                format!("encoding length {} for a space of {encoding_len}", self.encoding.len()),
            ));
        }
        if !(self.eer.is_finite() && (0.0..=1.0).contains(&self.eer)) || !(self.dcf.is_finite() && self.dcf >= 0.0) {
            return Err(Error::InvalidArgument(format!("metrics out of range: eer {} dcf {}", self.eer, self.dcf)));
        }
        Ok(())
    }

    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Eer => self.eer,
            Metric::Dcf => self.dcf,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Eer,
    Dcf,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eer" => Ok(Metric::Eer),
            "dcf" => Ok(Metric::Dcf),
            _ => Err(Error::InvalidArgument(format!("unknown metric `{s}`"))),
        }
    }
}

/// Min-max constants; `normalize(min) = 0`, `normalize(max) = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
}

impl Normalization {
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        self.min + y * (self.max - self.min)
    }
}

/// Min-max normalization of one metric over `records`.
pub fn normalize_targets(records: &[AccuracyRecord], metric: Metric) -> Result<(Vec<f64>, Normalization)> {
    if records.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            available: records.len(),
        });
    }
    let values: Vec<f64> = records.iter().map(|r| r.metric(metric)).collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(Error::InvalidArgument("all targets are equal; min-max normalization is undefined".into()));
    }
    let norm = Normalization { min, max };
    Ok((values.iter().map(|v| norm.normalize(*v)).collect(), norm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

/// Trained predictor bound to the space whose encoding it consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorModel {
    pub space: SpaceConfig,
    pub metric: Metric,
    pub norm: Normalization,
    pub params: ParamStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    /// Training-set MAE (normalized units) after each epoch.
    pub train_mae: Vec<f64>,
    /// Running minimum of `train_mae`; the returned weights are those of
    /// the epoch that attains the final value.
    pub best_train_mae: Vec<f64>,
    /// Validation MAE (normalized units) of the returned weights.
    pub validation_mae: Option<f64>,
}

fn layer_names(i: usize) -> (String, String) {
    (format!("layer{i}.weight"), format!("layer{i}.bias"))
}

fn init_params(inputs: usize, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut fan_in = inputs;
    for i in 0..LAYERS {
        let out = if i + 1 == LAYERS { 1 } else { HIDDEN };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..out * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
        let (wn, bn) = layer_names(i);
        store.insert(wn, Tensor::new(vec![out, fan_in], w)?)?;
        store.insert(bn, Tensor::zeros(&[out]))?;
        fan_in = out;
    }
    Ok(store)
}

/// Normalized predictions `[B, 1]` for encodings `[B, F]`.
fn forward(tape: &mut Tape, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..LAYERS {
        let (wn, bn) = layer_names(i);
        let w = tape.param(tape.store().id(&wn)?);
        let b = tape.param(tape.store().id(&bn)?);
        h = tape.linear(h, w, Some(b))?;
        if i + 1 < LAYERS {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn stack(rows: &[&[f64]]) -> Result<Tensor> {
    let f = rows.first().map_or(0, |r| r.len());
    Tensor::new(vec![rows.len(), f], rows.concat())
}

fn predict_normalized(params: &ParamStore, rows: &[&[f64]]) -> Result<Vec<f64>> {
    let mut tape = Tape::new(params);
    let x = tape.constant(stack(rows)?);
    let y = forward(&mut tape, x)?;
    Ok(tape.value(y).data().to_vec())
}

fn mae(params: &ParamStore, rows: &[&[f64]], targets: &[f64]) -> Result<f64> {
    let pred = predict_normalized(params, rows)?;
    Ok(pred.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / targets.len() as f64)
}

/// Fits a predictor of `metric` on `records` (at least 10) and returns the
/// weights of the epoch with the lowest training MAE. Constant targets are
/// trained with unit range since min-max scaling is undefined.
pub fn train_predictor(
    records: &[AccuracyRecord],
    validation: &[AccuracyRecord],
    space: &SpaceConfig,
    metric: Metric,
    config: &PredictorConfig,
) -> Result<(PredictorModel, PredictorReport)> {
    if records.len() < 10 {
        return Err(Error::InsufficientData {
            needed: 10,
            available: records.len(),
        });
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("predictor needs a positive batch size and learning rate".into()));
    }
    let len = encoding_len(space);
    for r in records.iter().chain(validation) {
        r.check(len)?;
    }
    let (targets, norm) = match normalize_targets(records, metric) {
        Ok(ok) => ok,
        Err(Error::InvalidArgument(_)) => {
            let v = records[0].metric(metric);
            let norm = Normalization { min: v, max: v + 1.0 };
            (vec![0.0; records.len()], norm)
        }
        Err(e) => return Err(e),
    };
    let mut params = init_params(len, config.seed)?;
    let mut adam = Adam::new(config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let rows: Vec<&[f64]> = records.iter().map(|r| r.encoding.as_slice()).collect();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut train_mae = Vec::with_capacity(config.epochs);
    let mut best_train_mae = Vec::with_capacity(config.epochs);
    let mut best = (mae(&params, &rows, &targets)?, params.clone());
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| rows[i]).collect();
            let t: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let grads = {
                let mut tape = Tape::new(&params);
                let x = tape.constant(stack(&batch)?);
                let y = forward(&mut tape, x)?;
                let target = tape.constant(Tensor::new(vec![t.len(), 1], t)?);
                let diff = tape.sub(y, target)?;
                let abs = tape.abs(diff);
                let loss = tape.mean(abs);
                tape.backward(loss)?.params
            };
            adam.step(&mut params, &grads, config.lr);
        }
        let epoch_mae = mae(&params, &rows, &targets)?;
        if epoch_mae < best.0 {
            best = (epoch_mae, params.clone());
        }
        train_mae.push(epoch_mae);
        best_train_mae.push(best.0);
    }
    let params = best.1;
    let validation_mae = if validation.is_empty() {
        None
    } else {
        let rows: Vec<&[f64]> = validation.iter().map(|r| r.encoding.as_slice()).collect();
        let t: Vec<f64> = validation.iter().map(|r| norm.normalize(r.metric(metric))).collect();
        Some(mae(&params, &rows, &t)?)
    };
    let model = PredictorModel {
        space: space.clone(),
        metric,
        norm,
        params,
    };
    let report = PredictorReport {
        train_mae,
        best_train_mae,
        validation_mae,
    };
    Ok((model, report))
}

impl PredictorModel {
    /// Denormalized metric estimates for raw encodings.
    pub fn predict_encodings(&self, encodings: &[&[f64]]) -> Result<Vec<f64>> {
        let len = encoding_len(&self.space);
        if let Some(bad) = encodings.iter().find(|e| e.len() != len) {
            return Err(Error::shape("predict", format!("encoding length {} for a space of {len}", bad.len())));
        }
        if encodings.is_empty() {
            return Ok(Vec::new());
        }
        Ok(predict_normalized(&self.params, encodings)?
            .into_iter()
            .map(|y| self.norm.denormalize(y))
            .collect())
    }

    /// Mean absolute error on `records` in metric units.
    pub fn mae(&self, records: &[AccuracyRecord]) -> Result<f64> {
        let rows: Vec<&[f64]> = records.iter().map(|r| r.encoding.as_slice()).collect();
        let pred = self.predict_encodings(&rows)?;
        Ok(pred.iter().zip(records).map(|(p, r)| (p - r.metric(self.metric)).abs()).sum::<f64>() / records.len().max(1) as f64)
    }
}

/// Estimate for `spec`; `space` must be the space the model was trained on.
pub fn predict(model: &PredictorModel, spec: &SubnetSpec, space: &SpaceConfig) -> Result<f64> {
    if *space != model.space {
        return Err(Error::InvalidArgument("spec space differs from the predictor's training space".into()));
    }
    let enc = encode_onehot(spec, space)?;
    Ok(model.predict_encodings(&[&enc])?[0])
}

/// Synthetic accuracy oracle: EER falls linearly in log-MACs from 12% at
/// the smallest subnet of `space` to 2% at the largest, plus Gaussian
/// noise of standard deviation `noise` seeded by `(seed, spec)`. The DCF is
/// a fixed monotone map of the EER.
pub fn surrogate_metrics(
    spec: &SubnetSpec,
    space: &SpaceConfig,
    supernet: &SupernetConfig,
    noise: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let frames = supernet.frames;
    let (lo, hi) = bounds(space);
    let (m_lo, m_hi) = (count_macs(&lo, supernet, frames)? as f64, count_macs(&hi, supernet, frames)? as f64);
    let m = count_macs(spec, supernet, frames)? as f64;
    let frac = if m_hi > m_lo { (m.ln() - m_lo.ln()) / (m_hi.ln() - m_lo.ln()) } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(spec.fingerprint());
    let jitter = if noise > 0.0 {
        Normal::new(0.0, noise)
            .map_err(|e| Error::Config(format!("surrogate noise: {e}")))?
            .sample(&mut rng)
    } else {
        0.0
    };
    let eer = (0.12 - 0.10 * frac + jitter).clamp(0.001, 0.5);
    let dcf = (1.0 - (-12.0 * eer).exp()).clamp(0.0, 1.0);
    Ok((eer, dcf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::spearman;
    use crate::space::{sample_subnet, SamplerState, Stage};

    fn records(n: usize, seed: u64, noise: f64) -> (SpaceConfig, Vec<AccuracyRecord>) {
        let cfg = SupernetConfig::toy();
        let space = cfg.space(Stage::Width2).unwrap();
        let mut state = SamplerState::new(seed);
        let recs = (0..n)
            .map(|_| {
                let spec = sample_subnet(&space, &mut state);
                let (eer, dcf) = surrogate_metrics(&spec, &space, &cfg, noise, 7).unwrap();
                AccuracyRecord::new(&spec, &space, eer, dcf).unwrap()
            })
            .collect();
        (space, recs)
    }

    fn with_eer(eer: f64, space: &SpaceConfig) -> AccuracyRecord {
        AccuracyRecord::new(&bounds(space).1, space, eer, 0.1).unwrap()
    }

    #[test]
    fn two_point_normalization() {
        let space = SupernetConfig::toy().space(Stage::Width2).unwrap();
        let recs = [with_eer(0.02, &space), with_eer(0.06, &space)];
        let (t, norm) = normalize_targets(&recs, Metric::Eer).unwrap();
        assert_eq!(t, vec![0.0, 1.0]);
        for x in [0.02, 0.031, 0.06, 0.5] {
            assert!((norm.denormalize(norm.normalize(x)) - x).abs() <= 1e-12);
        }
        assert!(normalize_targets(&recs[..1], Metric::Eer).is_err());
        assert!(normalize_targets(&[recs[0].clone(), recs[0].clone()], Metric::Eer).is_err());
    }

    #[test]
    fn validation_uses_training_constants() {
        let (space, recs) = records(30, 1, 0.0);
        let cfg = PredictorConfig {
            epochs: 2,
            ..PredictorConfig::default()
        };
        let (train, val) = recs.split_at(20);
        let (model, report) = train_predictor(train, val, &space, Metric::Eer, &cfg).unwrap();
        let (_, norm) = normalize_targets(train, Metric::Eer).unwrap();
        assert_eq!(model.norm, norm);
        let expect = model.mae(val).unwrap() / (norm.max - norm.min);
        assert!((report.validation_mae.unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn memorizes_a_duplicated_record() {
        let space = SupernetConfig::toy().space(Stage::Width2).unwrap();
        let recs = vec![with_eer(0.037, &space); 12];
        let cfg = PredictorConfig {
            epochs: 60,
            ..PredictorConfig::default()
        };
        let (model, _) = train_predictor(&recs, &[], &space, Metric::Eer, &cfg).unwrap();
        let got = predict(&model, recs[0].spec.as_ref().unwrap(), &space).unwrap();
        assert!((got - 0.037).abs() <= 1e-3, "{got}");
    }

    #[test]
    fn rejects_mismatched_encodings_and_spaces() {
        let (space, mut recs) = records(12, 2, 0.0);
        let cfg = PredictorConfig {
            epochs: 1,
            ..PredictorConfig::default()
        };
        let (model, _) = train_predictor(&recs, &[], &space, Metric::Dcf, &cfg).unwrap();
        let spec = recs[0].spec.clone().unwrap();
        let a = predict(&model, &spec, &space).unwrap();
        assert_eq!(a, predict(&model, &spec, &space).unwrap());
        let other = SpaceConfig::stepped((16, 64), (48, 192), 4).unwrap();
        assert!(predict(&model, &spec, &other).is_err());
        assert!(model.predict_encodings(&[&[1.0, 0.0]]).is_err());
        recs[3].encoding.pop();
        assert!(train_predictor(&recs, &[], &space, Metric::Eer, &cfg).is_err());
        assert!(train_predictor(&recs[..9], &[], &space, Metric::Eer, &cfg).is_err());
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let (space, recs) = records(20, 3, 0.002);
        let cfg = PredictorConfig {
            epochs: 3,
            ..PredictorConfig::default()
        };
        let a = train_predictor(&recs, &[], &space, Metric::Eer, &cfg).unwrap();
        let b = train_predictor(&recs, &[], &space, Metric::Eer, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn surrogate_is_deterministic_and_tracks_macs() {
        let cfg = SupernetConfig::toy();
        let space = cfg.space(Stage::Width2).unwrap();
        let (lo, hi) = bounds(&space);
        let a = surrogate_metrics(&lo, &space, &cfg, 0.0, 0).unwrap();
        let b = surrogate_metrics(&hi, &space, &cfg, 0.0, 0).unwrap();
        assert!((a.0 - 0.12).abs() < 1e-12 && (b.0 - 0.02).abs() < 1e-12);
        assert!(a.1 > b.1);
        let n1 = surrogate_metrics(&lo, &space, &cfg, 0.01, 5).unwrap();
        assert_eq!(n1, surrogate_metrics(&lo, &space, &cfg, 0.01, 5).unwrap());
        assert_ne!(n1, surrogate_metrics(&lo, &space, &cfg, 0.01, 6).unwrap());
    }

    #[test]
    fn learns_the_surrogate() {
        let (space, recs) = records(300, 4, 0.002);
        let (train, held) = recs.split_at(240);
        let cfg = PredictorConfig {
            epochs: 60,
            ..PredictorConfig::default()
        };
        let (model, report) = train_predictor(train, held, &space, Metric::Eer, &cfg).unwrap();
        let mean = train.iter().map(|r| r.eer).sum::<f64>() / train.len() as f64;
        let baseline = held.iter().map(|r| (r.eer - mean).abs()).sum::<f64>() / held.len() as f64;
        let mae = model.mae(held).unwrap();
        assert!(mae < baseline, "{mae} vs {baseline}");
        let rows: Vec<&[f64]> = held.iter().map(|r| r.encoding.as_slice()).collect();
        let pred = model.predict_encodings(&rows).unwrap();
        let truth: Vec<f64> = held.iter().map(|r| r.eer).collect();
        let rho = spearman(&pred, &truth).unwrap();
        assert!(rho >= 0.8, "rho {rho}");
        assert!(report.best_train_mae.windows(2).all(|w| w[1] <= w[0] + 1e-6));
        let best = report.train_mae.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(*report.best_train_mae.last().unwrap(), best);
        let rows: Vec<&[f64]> = train.iter().map(|r| r.encoding.as_slice()).collect();
        let (targets, _) = normalize_targets(train, Metric::Eer).unwrap();
        assert!((super::mae(&model.params, &rows, &targets).unwrap() - best).abs() < 1e-15);
    }
}
