//! Synthetic speaker data.
//!
//! Every speaker owns a fixed random template of `feature_dim` channels.
//! An utterance is a window of that template starting at a random shift,
//! plus temporally smoothed Gaussian noise. Both the shift range and the
//! noise amplitude scale with `noise_scale`, so a zero scale makes all
//! utterances of a speaker identical.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::Trial;
use crate::numerics::Tensor;
use crate::trainer::LabeledFeatures;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetConfig {
    /// Speakers in the training split.
    pub n_speakers: usize,
    /// Held-out speakers used for verification trials.
    pub eval_speakers: usize,
    pub utterances_per_speaker: usize,
    pub eval_utterances_per_speaker: usize,
    pub feature_dim: usize,
    pub frames: usize,
    pub noise_scale: f64,
    /// Largest template shift in frames at `noise_scale = 1`.
    pub max_shift: usize,
    /// Width of the moving average applied to the noise.
    pub smoothing: usize,
    pub target_trials: usize,
    pub nontarget_trials: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        Self {
            n_speakers: 32,
            eval_speakers: 12,
            utterances_per_speaker: 16,
            eval_utterances_per_speaker: 6,
            feature_dim: 80,
            frames: 64,
            noise_scale: 1.0,
            max_shift: 16,
            smoothing: 3,
            target_trials: 150,
            nontarget_trials: 150,
            seed: 0,
        }
    }
}

impl SyntheticDatasetConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_speakers < 2 || self.eval_speakers < 2 {
            return bad("need at least two training and two evaluation speakers");
        }
        if self.utterances_per_speaker == 0 || self.eval_utterances_per_speaker < 2 {
            return bad("need utterances for training and at least two per evaluation speaker");
        }
        if self.feature_dim == 0 || self.frames == 0 || self.smoothing == 0 {
            return bad("feature_dim, frames and smoothing must be positive");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative");
        }
        let u = self.eval_utterances_per_speaker;
        let targets = self.eval_speakers * u * (u - 1) / 2;
        let nontargets = self.eval_speakers * (self.eval_speakers - 1) / 2 * u * u;
        if self.target_trials > targets || self.nontarget_trials > nontargets {
            return bad("more trials requested than distinct utterance pairs");
        }
        if self.target_trials == 0 || self.nontarget_trials == 0 {
            return bad("trial list needs both target and non-target trials");
        }
        Ok(())
    }
}

/// Held-out utterances addressed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub ids: Vec<String>,
    /// `[N, C, T]`.
    pub features: Tensor,
    pub speakers: Vec<usize>,
}

impl EvalSet {
    pub fn index(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    /// Utterance `i` as `[C, T]`.
    pub fn utterance(&self, i: usize) -> Result<Tensor> {
        let (_, c, t) = self.features.dims3()?;
        Tensor::new(vec![c, t], self.features.data()[i * c * t..(i + 1) * c * t].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: LabeledFeatures,
    pub eval: EvalSet,
    pub trials: Vec<Trial>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Centered moving average along time, rescaled to unit variance for
/// white input.
fn smooth(row: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let gain = (width as f64).sqrt();
    (0..row.len())
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + width - half).min(row.len());
            row[lo..hi].iter().sum::<f64>() / (hi - lo) as f64 * gain
        })
        .collect()
}

struct Speakers {
    templates: Vec<Vec<f64>>,
    span: usize,
}

impl Speakers {
    fn new(n: usize, cfg: &SyntheticDatasetConfig, rng: &mut ChaCha8Rng) -> Self {
        let span = cfg.frames + cfg.max_shift;
        let templates = (0..n)
            .map(|_| {
                (0..cfg.feature_dim)
                    .flat_map(|_| smooth(&normal_vec(rng, span), cfg.smoothing))
                    .collect()
            })
            .collect();
        Self { templates, span }
    }

    fn utterance(&self, s: usize, cfg: &SyntheticDatasetConfig, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        use rand::Rng;
        let shift_range = (cfg.noise_scale * cfg.max_shift as f64).floor() as usize;
        let shift = rng.gen_range(0..=shift_range.min(cfg.max_shift));
        for ch in 0..cfg.feature_dim {
            let base = &self.templates[s][ch * self.span + shift..ch * self.span + shift + cfg.frames];
            if cfg.noise_scale == 0.0 {
                out.extend_from_slice(base);
            } else {
                let noise = smooth(&normal_vec(rng, cfg.frames), cfg.smoothing);
                out.extend(base.iter().zip(noise).map(|(b, n)| b + cfg.noise_scale * n));
            }
        }
    }
}

pub fn generate_dataset(cfg: &SyntheticDatasetConfig) -> Result<Dataset> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, t) = (cfg.feature_dim, cfg.frames);

    let train_spk = Speakers::new(cfg.n_speakers, cfg, &mut rng);
    let n_train = cfg.n_speakers * cfg.utterances_per_speaker;
    let mut data = Vec::with_capacity(n_train * c * t);
    let mut labels = Vec::with_capacity(n_train);
    for s in 0..cfg.n_speakers {
        for _ in 0..cfg.utterances_per_speaker {
            train_spk.utterance(s, cfg, &mut rng, &mut data);
            labels.push(s);
        }
    }
    let train = LabeledFeatures::new(Tensor::new(vec![n_train, c, t], data)?, labels, cfg.n_speakers)?;

    let eval_spk = Speakers::new(cfg.eval_speakers, cfg, &mut rng);
    let u = cfg.eval_utterances_per_speaker;
    let n_eval = cfg.eval_speakers * u;
    let mut data = Vec::with_capacity(n_eval * c * t);
    let (mut ids, mut speakers) = (Vec::with_capacity(n_eval), Vec::with_capacity(n_eval));
    for s in 0..cfg.eval_speakers {
        for k in 0..u {
            eval_spk.utterance(s, cfg, &mut rng, &mut data);
            ids.push(format!("spk{s:03}/utt{k:03}"));
            speakers.push(s);
        }
    }
    let eval = EvalSet {
        ids,
        features: Tensor::new(vec![n_eval, c, t], data)?,
        speakers,
    };

    let (mut targets, mut nontargets) = (Vec::new(), Vec::new());
    for i in 0..n_eval {
        for j in i + 1..n_eval {
            if eval.speakers[i] == eval.speakers[j] {
                targets.push((i, j));
            } else {
                nontargets.push((i, j));
            }
        }
    }
    targets.shuffle(&mut rng);
    nontargets.shuffle(&mut rng);
    let mut trials: Vec<Trial> = targets[..cfg.target_trials]
        .iter()
        .map(|p| (true, *p))
        .chain(nontargets[..cfg.nontarget_trials].iter().map(|p| (false, *p)))
        .map(|(target, (i, j))| Trial {
            target,
            a: eval.ids[i].clone(),
            b: eval.ids[j].clone(),
        })
        .collect();
    trials.shuffle(&mut rng);
    Ok(Dataset { train, eval, trials })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDatasetConfig {
        SyntheticDatasetConfig {
            n_speakers: 3,
            eval_speakers: 3,
            utterances_per_speaker: 4,
            eval_utterances_per_speaker: 3,
            feature_dim: 5,
            frames: 12,
            target_trials: 6,
            nontarget_trials: 12,
            ..SyntheticDatasetConfig::default()
        }
    }

    #[test]
    fn zero_noise_repeats_the_template() {
        let cfg = SyntheticDatasetConfig {
            noise_scale: 0.0,
            ..small()
        };
        let d = generate_dataset(&cfg).unwrap();
        let per = cfg.feature_dim * cfg.frames;
        let x = d.train.features.data();
        for s in 0..cfg.n_speakers {
            let first = &x[s * 4 * per..(s * 4 + 1) * per];
            for u in 1..4 {
                assert_eq!(&x[(s * 4 + u) * per..(s * 4 + u + 1) * per], first);
            }
        }
        assert_ne!(&x[..per], &x[4 * per..5 * per]);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&SyntheticDatasetConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train.features, c.train.features);
    }

    #[test]
    fn trial_list_has_the_configured_ratio() {
        let d = generate_dataset(&small()).unwrap();
        let targets = d.trials.iter().filter(|t| t.target).count();
        assert_eq!((targets, d.trials.len() - targets), (6, 12));
        for t in &d.trials {
            let (a, b) = (d.eval.index(&t.a).unwrap(), d.eval.index(&t.b).unwrap());
            assert_ne!(a, b);
            assert_eq!(d.eval.speakers[a] == d.eval.speakers[b], t.target);
        }
        let mut pairs: Vec<_> = d.trials.iter().map(|t| (t.a.clone(), t.b.clone())).collect();
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs.len(), 18);
    }

    #[test]
    fn impossible_trial_counts_rejected() {
        assert!(generate_dataset(&SyntheticDatasetConfig { target_trials: 10, ..small() }).is_err());
        assert!(generate_dataset(&SyntheticDatasetConfig { n_speakers: 1, ..small() }).is_err());
    }
}
