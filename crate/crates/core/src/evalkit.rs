//! Verification scoring: segment-pair cosine scores, EER, minimum DCF,
//! adaptive s-norm and Spearman rank correlation.
//!
//! A trial is accepted when its score is at least the threshold. With
//! thresholds swept over the distinct scores, the miss rate
//! `P_miss(τ) = #{targets < τ} / #targets` rises and the false-alarm rate
//! `P_fa(τ) = #{non-targets ≥ τ} / #non-targets` falls.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One verification trial.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub target: bool,
    pub a: String,
    pub b: String,
}

/// Both metrics of one scored trial list.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub dcf_threshold: f64,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `count` equally spaced segments of `frames` frames from a `[C, T]`
/// utterance, stacked as `[count, C, frames]`. Utterances shorter than a
/// segment are repeated cyclically.
pub fn extract_segments(utt: &Tensor, frames: usize, count: usize) -> Result<Tensor> {
    let (c, t) = utt.dims2()?;
    if t == 0 {
        return Err(Error::InvalidArgument("empty utterance".into()));
    }
    if frames == 0 || count == 0 {
        return Err(Error::InvalidArgument("segment length and count must be positive".into()));
    }
    let slack = t.saturating_sub(frames);
    let mut data = Vec::with_capacity(count * c * frames);
    for s in 0..count {
        let start = if count == 1 { 0 } else { (s * slack + (count - 1) / 2) / (count - 1) };
        for ch in 0..c {
            let row = &utt.data()[ch * t..(ch + 1) * t];
            data.extend((0..frames).map(|f| row[(start + f) % t]));
        }
    }
    Tensor::new(vec![count, c, frames], data)
}

/// Mean cosine similarity over all segment pairs of two `[C, T]`
/// utterances; `embedder` maps `[n, C, frames]` to `[n, E]`.
pub fn segment_scores(
    utt_a: &Tensor,
    utt_b: &Tensor,
    embedder: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    segment_frames: usize,
    segments_per_utt: usize,
) -> Result<f64> {
    let ea = embedder(&extract_segments(utt_a, segment_frames, segments_per_utt)?)?;
    let eb = embedder(&extract_segments(utt_b, segment_frames, segments_per_utt)?)?;
    mean_pair_cosine(&ea, &eb)
}

/// Mean cosine over all row pairs of two `[n, E]` embedding sets.
pub fn mean_pair_cosine(ea: &Tensor, eb: &Tensor) -> Result<f64> {
    let (na, e) = ea.dims2()?;
    let (nb, e2) = eb.dims2()?;
    if e != e2 || na == 0 || nb == 0 {
        return Err(Error::shape("mean_pair_cosine", format!("{:?} vs {:?}", ea.shape(), eb.shape())));
    }
    let mut total = 0.0;
    for ra in ea.data().chunks(e) {
        for rb in eb.data().chunks(e) {
            total += cosine(ra, rb);
        }
    }
    Ok(total / (na * nb) as f64)
}

fn split_classes(scores: &[f64], labels: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let mut tar: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
    let mut non: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
    if tar.is_empty() || non.is_empty() {
        return Err(Error::InvalidArgument("both target and non-target trials are required".into()));
    }
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    Ok((tar, non))
}

/// `(threshold, P_miss, P_fa)` at every distinct score and at +∞.
fn operating_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64, f64)>> {
    let (tar, non) = split_classes(scores, labels)?;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let (mut below_t, mut below_n) = (0, 0);
    Ok(thresholds
        .into_iter()
        .map(|th| {
            while below_t < tar.len() && tar[below_t] < th {
                below_t += 1;
            }
            while below_n < non.len() && non[below_n] < th {
                below_n += 1;
            }
            (th, below_t as f64 / nt, (non.len() - below_n) as f64 / nn)
        })
        .collect())
}

/// Equal error rate and its threshold, interpolating linearly between the
/// two operating points that bracket the crossing of the error curves.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let points = operating_points(scores, labels)?;
    let gap = |p: &(f64, f64, f64)| p.1 - p.2;
    for w in points.windows(2) {
        let (lo, hi) = (&w[0], &w[1]);
        if gap(lo) == 0.0 {
            return Ok((lo.1, lo.0));
        }
        if gap(lo) < 0.0 && gap(hi) >= 0.0 {
            let alpha = -gap(lo) / (gap(hi) - gap(lo));
            let eer = lo.1 + alpha * (hi.1 - lo.1);
            let threshold = if hi.0.is_finite() { lo.0 + alpha * (hi.0 - lo.0) } else { lo.0 };
            return Ok((eer, threshold));
        }
    }
    // unreachable for two non-empty classes: the gap runs from -1 to +1
    let last = points.last().expect("at least one point");
    Ok((last.1, last.0))
}

/// Minimum normalized detection cost and the threshold that attains it
/// (first one in ascending order on ties).
pub fn compute_min_dcf(scores: &[f64], labels: &[bool], p_target: f64, c_miss: f64, c_fa: f64) -> Result<(f64, f64)> {
    if !(p_target > 0.0 && p_target < 1.0) || c_miss <= 0.0 || c_fa <= 0.0 {
        return Err(Error::InvalidArgument("need 0 < p_target < 1 and positive costs".into()));
    }
    let norm = (p_target * c_miss).min((1.0 - p_target) * c_fa);
    let mut best = (f64::INFINITY, f64::INFINITY);
    for (th, p_miss, p_fa) in operating_points(scores, labels)? {
        let cost = (p_target * c_miss * p_miss + (1.0 - p_target) * c_fa * p_fa) / norm;
        if cost < best.0 {
            best = (cost, th);
        }
    }
    Ok(best)
}

/// EER and minDCF at `p_target = 0.01`, `C_miss = C_fa = 1`.
pub fn evaluate(scores: &[f64], labels: &[bool]) -> Result<Metrics> {
    let (eer, eer_threshold) = compute_eer(scores, labels)?;
    let (min_dcf, dcf_threshold) = compute_min_dcf(scores, labels, 0.01, 1.0, 1.0)?;
    Ok(Metrics {
        eer,
        eer_threshold,
        min_dcf,
        dcf_threshold,
    })
}

fn top_k_stats(cohort: &[f64], k: usize) -> Result<(f64, f64)> {
    if k == 0 || cohort.len() < k {
        return Err(Error::InsufficientData {
            needed: k.max(1),
            available: cohort.len(),
        });
    }
    let mut sorted = cohort.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = &sorted[..k];
    let mean = top.iter().sum::<f64>() / k as f64;
    let var = top.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64;
    if top[0] == top[k - 1] {
        return Err(Error::InvalidArgument("cohort scores have zero spread".into()));
    }
    Ok((mean, var.sqrt()))
}

/// Adaptive symmetric score normalization over the top-`k` cohort scores
/// of each side (population standard deviation).
pub fn snorm_topk(raw: f64, enroll_cohort: &[f64], test_cohort: &[f64], k: usize) -> Result<f64> {
    let (me, se) = top_k_stats(enroll_cohort, k)?;
    let (mt, st) = top_k_stats(test_cohort, k)?;
    Ok(0.5 * ((raw - me) / se + (raw - mt) / st))
}

/// Ranks starting at 1, ties sharing the average of their positions.
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidArgument("correlation of a constant sequence is undefined".into()));
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs two sequences of equal length ≥ 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("spearman inputs must be finite".into()));
    }
    pearson(&fractional_ranks(xs), &fractional_ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scores on a 1e-3 lattice (ties likely) with a half-offset 1e-4 mesh
    /// that lands strictly between any two distinct scores.
    fn lattice_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
        let n = rng.gen_range(4..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores = labels
            .iter()
            .map(|t| {
                let shift = if *t { 150 } else { 0 };
                (rng.gen_range(0..700) + shift) as f64 * 1e-3
            })
            .collect();
        (scores, labels)
    }

    fn mesh() -> impl Iterator<Item = f64> {
        (0..=9_000).map(|i| -0.00005 + i as f64 * 1e-4)
    }

    fn rates(scores: &[f64], labels: &[bool], th: f64) -> (f64, f64) {
        let nt = labels.iter().filter(|l| **l).count() as f64;
        let nn = labels.len() as f64 - nt;
        let miss = scores.iter().zip(labels).filter(|(s, l)| **l && **s < th).count() as f64;
        let fa = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= th).count() as f64;
        (miss / nt, fa / nn)
    }

    /// Mesh oracle: last mesh point with FRR < FAR and first with FRR ≥ FAR,
    /// interpolated on the same rule.
    fn mesh_eer(scores: &[f64], labels: &[bool]) -> f64 {
        let pts: Vec<(f64, f64)> = mesh().map(|th| rates(scores, labels, th)).collect();
        let i = pts.iter().position(|(m, f)| m >= f).unwrap();
        let (hi, lo) = (pts[i], pts[i - 1]);
        if hi.0 == hi.1 {
            return hi.0;
        }
        let (gl, gh) = (lo.0 - lo.1, hi.0 - hi.1);
        lo.0 + (-gl / (gh - gl)) * (hi.0 - lo.0)
    }

    fn mesh_dcf(scores: &[f64], labels: &[bool]) -> f64 {
        mesh()
            .chain([f64::INFINITY])
            .map(|th| {
                let (m, f) = rates(scores, labels, th);
                (0.01 * m + 0.99 * f) / 0.01
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn separable_scores_have_zero_errors() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [true, true, false, false];
        assert_eq!(compute_eer(&scores, &labels).unwrap().0, 0.0);
        assert_eq!(compute_min_dcf(&scores, &labels, 0.01, 1.0, 1.0).unwrap().0, 0.0);
    }

    #[test]
    fn interleaved_example() {
        let scores = [0.9, 0.1, 0.8, 0.2];
        let labels = [true, true, false, false];
        assert_eq!(compute_eer(&scores, &labels).unwrap().0, 0.5);
    }

    #[test]
    fn threshold_above_everything_costs_one() {
        let scores = [0.1, 0.9, 0.5];
        let labels = [true, false, false];
        let (mut p, mut f) = (0.0, 0.0);
        for (th, pm, pf) in operating_points(&scores, &labels).unwrap() {
            if th.is_infinite() {
                (p, f) = (pm, pf);
            }
        }
        assert_eq!((p, f), (1.0, 0.0));
        assert_eq!(compute_min_dcf(&scores, &labels, 0.01, 1.0, 1.0).unwrap().0, 1.0);
    }

    #[test]
    fn single_class_rejected() {
        assert!(compute_eer(&[0.1, 0.2], &[true, true]).is_err());
        assert!(compute_min_dcf(&[0.1, 0.2], &[false, false], 0.01, 1.0, 1.0).is_err());
        assert!(compute_eer(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn metrics_match_dense_mesh() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (s, l) = lattice_case(&mut rng);
            let (eer, _) = compute_eer(&s, &l).unwrap();
            let (dcf, _) = compute_min_dcf(&s, &l, 0.01, 1.0, 1.0).unwrap();
            assert!((eer - mesh_eer(&s, &l)).abs() <= 1e-9, "{s:?} {l:?}");
            assert!((dcf - mesh_dcf(&s, &l)).abs() <= 1e-9);
            assert!((0.0..=1.0).contains(&dcf));
        }
    }

    #[test]
    fn metrics_invariant_under_monotone_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let (s, l) = lattice_case(&mut rng);
            let base = evaluate(&s, &l).unwrap();
            let mapped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            let m = evaluate(&mapped, &l).unwrap();
            assert_eq!((base.eer, base.min_dcf), (m.eer, m.min_dcf));
        }
    }

    #[test]
    fn trial_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (s, l) = lattice_case(&mut rng);
        let (rs, rl): (Vec<f64>, Vec<bool>) = s.iter().zip(&l).rev().map(|(a, b)| (*a, *b)).unzip();
        assert_eq!(evaluate(&s, &l).unwrap(), evaluate(&rs, &rl).unwrap());
    }

    fn utt(c: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![c, t], (0..c * t).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Channel sums of each segment, a deterministic stand-in embedder.
    fn sum_embedder(x: &Tensor) -> Result<Tensor> {
        let (n, c, t) = x.dims3()?;
        let data = x.data().chunks(t).map(|r| r.iter().sum()).collect();
        Tensor::new(vec![n, c], data)
    }

    #[test]
    fn identical_utterances_score_one() {
        // every extracted segment of these utterances is the same
        let constant = Tensor::new(vec![2, 12], [vec![0.5; 12], vec![-1.5; 12]].concat()).unwrap();
        let s = segment_scores(&constant, &constant, &mut sum_embedder, 8, 2).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let short = utt(3, 6, 1);
        let s = segment_scores(&short, &short, &mut sum_embedder, 6, 2).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_embeddings_score_zero() {
        let mut calls = 0;
        let mut emb = |x: &Tensor| {
            calls += 1;
            let n = x.shape()[0];
            let row = if calls == 1 { [1.0, 0.0] } else { [0.0, 2.0] };
            Tensor::new(vec![n, 2], row.repeat(n))
        };
        let u = utt(2, 10, 2);
        assert_eq!(segment_scores(&u, &u, &mut emb, 4, 2).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_matches_enumeration() {
        let (a, b) = (utt(3, 30, 3), utt(3, 25, 4));
        let got = segment_scores(&a, &b, &mut sum_embedder, 10, 2).unwrap();
        // segments start at 0 and T-10
        let seg = |u: &Tensor, start: usize| -> Vec<f64> {
            let t = u.shape()[1];
            (0..3).map(|c| u.data()[c * t + start..c * t + start + 10].iter().sum()).collect()
        };
        let sa = [seg(&a, 0), seg(&a, 20)];
        let sb = [seg(&b, 0), seg(&b, 15)];
        let mut expect = 0.0;
        for x in &sa {
            for y in &sb {
                expect += cosine(x, y) / 4.0;
            }
        }
        assert!((got - expect).abs() < 1e-14);
        let flipped = segment_scores(&b, &a, &mut sum_embedder, 10, 2).unwrap();
        assert!((got - flipped).abs() < 1e-14);
    }

    #[test]
    fn short_utterances_wrap_around() {
        let u = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = extract_segments(&u, 7, 2).unwrap();
        assert_eq!(s.shape(), &[2, 1, 7]);
        assert_eq!(&s.data()[..7], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0]);
        assert!(extract_segments(&Tensor::zeros(&[2, 0]), 4, 2).is_err());
    }

    #[test]
    fn snorm_cases() {
        let cohort = [0.1, 0.5, 0.3, 0.9, 0.7];
        let one = snorm_topk(0.8, &cohort, &cohort, 3).unwrap();
        // top-3 = {0.9, 0.7, 0.5}: mean 0.7, population std sqrt(0.08/3)
        let manual = (0.8 - 0.7) / (0.08f64 / 3.0).sqrt();
        assert!((one - manual).abs() < 1e-12);
        assert!(snorm_topk(0.7, &cohort, &cohort, 3).unwrap().abs() < 1e-12);

        let other = [0.0, 0.2, 0.4, 0.6, 1.0];
        // top-3 = {1.0, 0.6, 0.4}: mean 2/3, population std sqrt(0.0622…)
        let (m2, v2) = (2.0 / 3.0, ((1.0f64 - 2.0 / 3.0).powi(2) + (0.6f64 - 2.0 / 3.0).powi(2) + (0.4f64 - 2.0 / 3.0).powi(2)) / 3.0);
        let both = snorm_topk(0.8, &cohort, &other, 3).unwrap();
        assert!((both - 0.5 * (manual + (0.8 - m2) / v2.sqrt())).abs() < 1e-12);

        assert!(snorm_topk(0.5, &[0.2; 5], &cohort, 3).is_err());
        assert!(snorm_topk(0.5, &cohort[..2], &cohort, 3).is_err());
    }

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 45.0]).unwrap(), 1.0);
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(spearman(&x, &[1.0; 4]).is_err());
        assert!(spearman(&x, &[1.0, 2.0]).is_err());

        // ties: ranks of ys = {1, 2.5, 2.5, 4}
        let ys = [0.1, 0.5, 0.5, 0.9];
        assert_eq!(fractional_ranks(&ys), vec![1.0, 2.5, 2.5, 4.0]);
        let rx = [1.0, 2.0, 3.0, 4.0];
        let ry = [1.0, 2.5, 2.5, 4.0];
        let mean = 2.5;
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mean).powi(2)).sum();
        let vy: f64 = ry.iter().map(|a| (a - mean).powi(2)).sum();
        assert!((spearman(&x, &ys).unwrap() - cov / (vx * vy).sqrt()).abs() < 1e-15);
    }
}
