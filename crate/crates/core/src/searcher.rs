//! Constrained architecture search: minimize an accuracy metric (EER or
//! DCF, lower is better) subject to `cost(spec) ≤ budget`.
//!
//! Three strategies share one result type: exhaustive [`grid_search`],
//! [`random_search`] and the evolutionary [`mpea`], which ranks
//! individuals feasibility-first (feasible beats infeasible, feasible ones
//! by metric, infeasible ones by how far they exceed the budget).

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::{count_macs, count_params, estimate_latency, LatencyTable};
use crate::error::{Error, Result};
use crate::space::{sample_with, validate, GridSpace, SpaceConfig, SubnetSpec};
use crate::supernet::SupernetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMetric {
    Macs,
    Params,
    LatencyMs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub metric: CostMetric,
    pub budget: f64,
    /// Frames per utterance for MACs and latency.
    pub frames: usize,
}

impl Constraint {
    pub fn new(metric: CostMetric, budget: f64, frames: usize) -> Result<Self> {
        if !(budget > 0.0) {
            return Err(Error::InvalidArgument(format!("budget must be positive, got {budget}")));
        }
        if frames == 0 {
            return Err(Error::InvalidArgument("frames must be at least 1".into()));
        }
        Ok(Self { metric, budget, frames })
    }
}

/// Real cost of a spec under `constraint`'s metric.
pub fn spec_cost(
    spec: &SubnetSpec,
    constraint: &Constraint,
    supernet: &SupernetConfig,
    table: Option<&LatencyTable>,
) -> Result<f64> {
    match constraint.metric {
        CostMetric::Macs => Ok(count_macs(spec, supernet, constraint.frames)? as f64),
        CostMetric::Params => Ok(count_params(spec, supernet)? as f64),
        CostMetric::LatencyMs => {
            let table = table.ok_or_else(|| Error::Config("latency budget needs a latency table".into()))?;
            estimate_latency(spec, table)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub population: usize,
    pub mutation_rate: f64,
    pub generations: usize,
    pub seed: u64,
    pub elitism: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population: 50,
            mutation_rate: 0.1,
            generations: 200,
            seed: 0,
            elitism: 1,
        }
    }
}

impl EvolutionConfig {
    pub fn check(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Config("population must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::Config("mutation rate must lie in [0,1]".into()));
        }
        if self.elitism > self.population {
            return Err(Error::Config("elitism exceeds the population".into()));
        }
        Ok(())
    }
}

/// Genome operations over a family of specs.
pub trait SearchSpace {
    fn sample(&self, rng: &mut ChaCha8Rng) -> SubnetSpec;
    /// Per-dimension uniform crossover.
    fn crossover(&self, a: &SubnetSpec, b: &SubnetSpec, rng: &mut ChaCha8Rng) -> SubnetSpec;
    /// Resamples each gene uniformly with probability `rate`.
    fn mutate(&self, spec: &SubnetSpec, rate: f64, rng: &mut ChaCha8Rng) -> SubnetSpec;
    fn contains(&self, spec: &SubnetSpec) -> bool;
}

fn pick(rng: &mut ChaCha8Rng, options: &[usize]) -> usize {
    options[rng.gen_range(0..options.len())]
}

impl SearchSpace for SpaceConfig {
    fn sample(&self, rng: &mut ChaCha8Rng) -> SubnetSpec {
        sample_with(self, rng)
    }

    fn crossover(&self, a: &SubnetSpec, b: &SubnetSpec, rng: &mut ChaCha8Rng) -> SubnetSpec {
        let depth = if rng.gen_bool(0.5) { a.depth } else { b.depth };
        let mut gene = |xs: &[usize], ys: &[usize], p: usize| {
            let (first, second) = if rng.gen_bool(0.5) { (xs, ys) } else { (ys, xs) };
            first.get(p).or_else(|| second.get(p)).copied().expect("one parent is deep enough")
        };
        let kernels = (0..=depth).map(|p| gene(&a.kernels, &b.kernels, p)).collect();
        let widths = (0..=depth).map(|p| gene(&a.widths_front, &b.widths_front, p)).collect();
        let back = if rng.gen_bool(0.5) { a.width_back } else { b.width_back };
        SubnetSpec::new(depth, kernels, widths, back)
    }

    fn mutate(&self, spec: &SubnetSpec, rate: f64, rng: &mut ChaCha8Rng) -> SubnetSpec {
        let mut out = spec.clone();
        if rng.gen_bool(rate) {
            out.depth = pick(rng, &self.depth_options);
            let n = out.depth + 1;
            while out.kernels.len() < n {
                out.kernels.push(pick(rng, &self.kernel_options));
                out.widths_front.push(pick(rng, &self.width_front_options));
            }
            out.kernels.truncate(n);
            out.widths_front.truncate(n);
        }
        for k in &mut out.kernels {
            if rng.gen_bool(rate) {
                *k = pick(rng, &self.kernel_options);
            }
        }
        for w in &mut out.widths_front {
            if rng.gen_bool(rate) {
                *w = pick(rng, &self.width_front_options);
            }
        }
        if rng.gen_bool(rate) {
            out.width_back = pick(rng, &self.width_back_options);
        }
        out
    }

    fn contains(&self, spec: &SubnetSpec) -> bool {
        validate(spec, self).is_ok()
    }
}

/// Grid members are `(D, K, C)` triples; the back width follows `C`.
impl SearchSpace for GridSpace {
    fn sample(&self, rng: &mut ChaCha8Rng) -> SubnetSpec {
        let d = pick(rng, &self.depths);
        let k = pick(rng, &self.kernels);
        let c = pick(rng, &self.widths);
        SubnetSpec::grid(d, k, c)
    }

    fn crossover(&self, a: &SubnetSpec, b: &SubnetSpec, rng: &mut ChaCha8Rng) -> SubnetSpec {
        let mut either = |x: usize, y: usize| if rng.gen_bool(0.5) { x } else { y };
        let d = either(a.depth, b.depth);
        let k = either(a.kernels[0], b.kernels[0]);
        let c = either(a.widths_front[0], b.widths_front[0]);
        SubnetSpec::grid(d, k, c)
    }

    fn mutate(&self, spec: &SubnetSpec, rate: f64, rng: &mut ChaCha8Rng) -> SubnetSpec {
        let mut gene = |v: usize, options: &[usize]| if rng.gen_bool(rate) { pick(rng, options) } else { v };
        let d = gene(spec.depth, &self.depths);
        let k = gene(spec.kernels[0], &self.kernels);
        let c = gene(spec.widths_front[0], &self.widths);
        SubnetSpec::grid(d, k, c)
    }

    fn contains(&self, spec: &SubnetSpec) -> bool {
        let (Some(&k), Some(&c)) = (spec.kernels.first(), spec.widths_front.first()) else {
            return false;
        };
        self.depths.contains(&spec.depth)
            && self.kernels.contains(&k)
            && self.widths.contains(&c)
            && *spec == SubnetSpec::grid(spec.depth, k, c)
    }
}

/// One evaluated candidate; `metric` is absent for infeasible ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub spec: SubnetSpec,
    pub cost: f64,
    pub metric: Option<f64>,
}

impl Candidate {
    pub fn feasible(&self) -> bool {
        self.metric.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    /// Best feasible metric seen so far.
    pub best: Option<f64>,
    /// Mean metric of the feasible members of this generation.
    pub mean: Option<f64>,
    pub feasible_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMetrics {
    pub metric: f64,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub constraint: Constraint,
    pub best_spec: Option<SubnetSpec>,
    pub best_metrics: Option<BestMetrics>,
    pub feasibility_rate: f64,
    /// Every candidate, for grid and random search.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub log: Vec<GenerationLog>,
}

impl SearchResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("search result serializes")
    }
}

fn evaluate(
    spec: &SubnetSpec,
    constraint: &Constraint,
    evaluator: &mut dyn FnMut(&SubnetSpec) -> Result<f64>,
    cost_fn: &dyn Fn(&SubnetSpec) -> Result<f64>,
) -> Result<Candidate> {
    let cost = cost_fn(spec)?;
    let metric = if cost <= constraint.budget {
        let m = evaluator(spec)?;
        if !m.is_finite() {
            return Err(Error::NonFinite {
                batch: 0,
                spec: spec.to_string(),
            });
        }
        Some(m)
    } else {
        None
    };
    Ok(Candidate {
        spec: spec.clone(),
        cost,
        metric,
    })
}

/// Lowest metric among feasible candidates, first on ties.
fn best_of<'a>(cands: impl IntoIterator<Item = &'a Candidate>) -> Option<&'a Candidate> {
    let mut best: Option<&Candidate> = None;
    for c in cands {
        if let Some(m) = c.metric {
            if best.is_none_or(|b| m < b.metric.expect("feasible")) {
                best = Some(c);
            }
        }
    }
    best
}

fn finish(constraint: &Constraint, candidates: Vec<Candidate>, log: Vec<GenerationLog>, rate: f64) -> SearchResult {
    let best = best_of(&candidates).cloned();
    SearchResult {
        constraint: *constraint,
        best_spec: best.as_ref().map(|b| b.spec.clone()),
        best_metrics: best.map(|b| BestMetrics {
            metric: b.metric.expect("feasible"),
            cost: b.cost,
        }),
        feasibility_rate: rate,
        candidates,
        log,
    }
}

fn feasible_rate(cands: &[Candidate]) -> f64 {
    if cands.is_empty() {
        0.0
    } else {
        cands.iter().filter(|c| c.feasible()).count() as f64 / cands.len() as f64
    }
}

/// Evaluates every feasible member of `grid`.
pub fn grid_search(
    grid: &[SubnetSpec],
    evaluator: &mut dyn FnMut(&SubnetSpec) -> Result<f64>,
    constraint: &Constraint,
    cost_fn: &dyn Fn(&SubnetSpec) -> Result<f64>,
) -> Result<SearchResult> {
    let candidates = grid
        .iter()
        .map(|s| evaluate(s, constraint, evaluator, cost_fn))
        .collect::<Result<Vec<_>>>()?;
    let rate = feasible_rate(&candidates);
    Ok(finish(constraint, candidates, Vec::new(), rate))
}

/// Samples `n` specs uniformly with a seeded generator.
pub fn random_search(
    space: &dyn SearchSpace,
    n: usize,
    evaluator: &mut dyn FnMut(&SubnetSpec) -> Result<f64>,
    constraint: &Constraint,
    cost_fn: &dyn Fn(&SubnetSpec) -> Result<f64>,
    seed: u64,
) -> Result<SearchResult> {
    if n == 0 {
        return Err(Error::InvalidArgument("random search needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates = (0..n)
        .map(|_| evaluate(&space.sample(&mut rng), constraint, evaluator, cost_fn))
        .collect::<Result<Vec<_>>>()?;
    let rate = feasible_rate(&candidates);
    Ok(finish(constraint, candidates, Vec::new(), rate))
}

/// Ordering key: feasible first by metric, then infeasible by excess cost.
fn rank_key(c: &Candidate, budget: f64) -> (bool, f64) {
    match c.metric {
        Some(m) => (false, m),
        None => (true, c.cost - budget),
    }
}

fn better(a: &Candidate, b: &Candidate, budget: f64) -> bool {
    let (ka, kb) = (rank_key(a, budget), rank_key(b, budget));
    ka.0 < kb.0 || (ka.0 == kb.0 && ka.1 < kb.1)
}

/// Offspring already present in the parent or offspring population are
/// regenerated up to this many times before a duplicate is accepted.
const DUPLICATE_RETRIES: usize = 20;

/// Model-predictive evolutionary search.
pub fn mpea(
    space: &dyn SearchSpace,
    accuracy_fn: &mut dyn FnMut(&SubnetSpec) -> Result<f64>,
    constraint: &Constraint,
    cost_fn: &dyn Fn(&SubnetSpec) -> Result<f64>,
    evo: &EvolutionConfig,
) -> Result<SearchResult> {
    mpea_seeded(space, accuracy_fn, constraint, cost_fn, evo, &[])
}

/// [`mpea`] with `initial` placed at the front of the first population.
pub fn mpea_seeded(
    space: &dyn SearchSpace,
    accuracy_fn: &mut dyn FnMut(&SubnetSpec) -> Result<f64>,
    constraint: &Constraint,
    cost_fn: &dyn Fn(&SubnetSpec) -> Result<f64>,
    evo: &EvolutionConfig,
    initial: &[SubnetSpec],
) -> Result<SearchResult> {
    evo.check()?;
    if let Some(bad) = initial.iter().find(|s| !space.contains(s)) {
        return Err(Error::InvalidArgument(format!("initial spec {bad} is outside the search space")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(evo.seed);
    let mut cache: BTreeMap<SubnetSpec, Candidate> = BTreeMap::new();
    let mut assess = |spec: SubnetSpec, cache: &mut BTreeMap<SubnetSpec, Candidate>| -> Result<Candidate> {
        if let Some(c) = cache.get(&spec) {
            return Ok(c.clone());
        }
        let c = evaluate(&spec, constraint, accuracy_fn, cost_fn)?;
        cache.insert(spec, c.clone());
        Ok(c)
    };

    let mut population = Vec::with_capacity(evo.population);
    for spec in initial.iter().take(evo.population) {
        population.push(assess(spec.clone(), &mut cache)?);
    }
    while population.len() < evo.population {
        let spec = space.sample(&mut rng);
        population.push(assess(spec, &mut cache)?);
    }

    let mut best: Option<Candidate> = None;
    let mut log = Vec::with_capacity(evo.generations + 1);
    let record = |generation: usize, pop: &[Candidate], best: &mut Option<Candidate>, log: &mut Vec<GenerationLog>| {
        if let Some(b) = best_of(pop) {
            if best.as_ref().is_none_or(|cur| b.metric < cur.metric) {
                *best = Some(b.clone());
            }
        }
        let feasible: Vec<f64> = pop.iter().filter_map(|c| c.metric).collect();
        log.push(GenerationLog {
            generation,
            best: best.as_ref().and_then(|b| b.metric),
            mean: (!feasible.is_empty()).then(|| feasible.iter().sum::<f64>() / feasible.len() as f64),
            feasible_fraction: feasible.len() as f64 / pop.len() as f64,
        });
    };
    record(0, &population, &mut best, &mut log);

    for generation in 1..=evo.generations {
        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &b| {
            let (ka, kb) = (rank_key(&population[a], constraint.budget), rank_key(&population[b], constraint.budget));
            ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(a.cmp(&b))
        });
        let mut next: Vec<Candidate> = order
            .iter()
            .take(evo.elitism)
            .map(|&i| population[i].clone())
            .filter(Candidate::feasible)
            .collect();
        let tournament = |rng: &mut ChaCha8Rng| {
            let i = rng.gen_range(0..population.len());
            let j = rng.gen_range(0..population.len());
            let (first, second) = (i.min(j), i.max(j));
            if better(&population[second], &population[first], constraint.budget) {
                second
            } else {
                first
            }
        };
        let mut taken: BTreeSet<SubnetSpec> = population.iter().chain(&next).map(|c| c.spec.clone()).collect();
        while next.len() < evo.population {
            let mut attempt = 0;
            let child = loop {
                let a = tournament(&mut rng);
                let b = tournament(&mut rng);
                let child = space.crossover(&population[a].spec, &population[b].spec, &mut rng);
                let child = space.mutate(&child, evo.mutation_rate, &mut rng);
                attempt += 1;
                if attempt >= DUPLICATE_RETRIES || !taken.contains(&child) {
                    break child;
                }
            };
            debug_assert!(space.contains(&child));
            taken.insert(child.clone());
            next.push(assess(child, &mut cache)?);
        }
        population = next;
        record(generation, &population, &mut best, &mut log);
    }

    // re-check the winner with the real cost function, not the cache
    if let Some(b) = &best {
        let cost = cost_fn(&b.spec)?;
        if cost > constraint.budget {
            return Err(Error::InvalidArgument(format!("winner {} exceeds the budget on re-evaluation", b.spec)));
        }
    }
    let seen = cache.len();
    let feasible = cache.values().filter(|c| c.feasible()).count();
    Ok(SearchResult {
        constraint: *constraint,
        best_spec: best.as_ref().map(|b| b.spec.clone()),
        best_metrics: best.map(|b| BestMetrics {
            metric: b.metric.expect("feasible"),
            cost: b.cost,
        }),
        feasibility_rate: feasible as f64 / seen.max(1) as f64,
        candidates: Vec::new(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::surrogate_metrics;
    use crate::space::{enumerate_grid, Stage};

    fn full() -> SupernetConfig {
        SupernetConfig::full_scale()
    }

    fn macs_constraint(budget: f64) -> Constraint {
        Constraint::new(CostMetric::Macs, budget, 300).unwrap()
    }

    fn macs(spec: &SubnetSpec) -> Result<f64> {
        Ok(count_macs(spec, &full(), 300)? as f64)
    }

    /// Noisy EER surrogate over the grid's fine-grained space.
    fn oracle(grid: &GridSpace) -> impl FnMut(&SubnetSpec) -> Result<f64> {
        let space = grid.space().unwrap();
        move |s: &SubnetSpec| Ok(surrogate_metrics(s, &space, &full(), 0.004, 3)?.0)
    }

    #[test]
    fn grid_is_fully_evaluated() {
        let grid = GridSpace::full_scale();
        let specs = enumerate_grid(&grid);
        let mut calls = 0;
        let mut eval = |_: &SubnetSpec| {
            calls += 1;
            Ok(0.1)
        };
        let r = grid_search(&specs, &mut eval, &macs_constraint(1e12), &macs).unwrap();
        assert_eq!(r.candidates.len(), 441);
        assert_eq!(calls, 441);
        assert_eq!(r.best_spec, Some(specs[0].clone()));
    }

    #[test]
    fn grid_budget_below_cheapest_is_empty() {
        let specs = enumerate_grid(&GridSpace::full_scale());
        let cheapest = specs.iter().map(|s| macs(s).unwrap()).fold(f64::INFINITY, f64::min);
        let mut eval = |_: &SubnetSpec| -> Result<f64> { panic!("no feasible spec should be evaluated") };
        let r = grid_search(&specs, &mut eval, &macs_constraint(cheapest - 1.0), &macs).unwrap();
        assert_eq!(r.best_spec, None);
        assert_eq!(r.feasibility_rate, 0.0);
    }

    #[test]
    fn macs_as_accuracy_picks_cheapest_feasible() {
        let specs = enumerate_grid(&GridSpace::full_scale());
        let budget = 5e8;
        let mut eval = |s: &SubnetSpec| macs(s);
        let r = grid_search(&specs, &mut eval, &macs_constraint(budget), &macs).unwrap();
        let cheapest = specs
            .iter()
            .filter(|s| macs(s).unwrap() <= budget)
            .min_by(|a, b| macs(a).unwrap().total_cmp(&macs(b).unwrap()))
            .unwrap();
        assert_eq!(r.best_spec.as_ref(), Some(cheapest));
    }

    #[test]
    fn budget_relaxation_never_hurts() {
        let grid = GridSpace::full_scale();
        let specs = enumerate_grid(&grid);
        let mut eval = oracle(&grid);
        let mut last = f64::INFINITY;
        for budget in [2e8, 4e8, 6e8, 1e9, 2e9, 1e10] {
            let r = grid_search(&specs, &mut eval, &macs_constraint(budget), &macs).unwrap();
            let m = r.best_metrics.map_or(f64::INFINITY, |b| b.metric);
            assert!(m <= last);
            last = m;
        }
    }

    #[test]
    fn random_search_cases() {
        let space = SpaceConfig::full_scale(Stage::Width2);
        let c = macs_constraint(6e8);
        let mut eval = |s: &SubnetSpec| Ok(surrogate_metrics(s, &SpaceConfig::full_scale(Stage::Width2), &full(), 0.004, 1)?.0);
        let a = random_search(&space, 200, &mut eval, &c, &macs, 9).unwrap();
        let b = random_search(&space, 200, &mut eval, &c, &macs, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.candidates.len(), 200);
        assert!(macs(a.best_spec.as_ref().unwrap()).unwrap() <= 6e8);

        let one = random_search(&space, 1, &mut eval, &c, &macs, 4).unwrap();
        let sample = &one.candidates[0];
        assert_eq!(one.best_spec.is_some(), sample.cost <= 6e8);
        assert!(random_search(&space, 0, &mut eval, &c, &macs, 4).is_err());
    }

    #[test]
    fn genome_operators_stay_valid() {
        let space = SpaceConfig::full_scale(Stage::Width2);
        let grid = GridSpace::full_scale();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let (a, b) = (space.sample(&mut rng), space.sample(&mut rng));
            let child = space.mutate(&space.crossover(&a, &b, &mut rng), 0.3, &mut rng);
            assert!(space.contains(&child), "{child}");
            let (a, b) = (grid.sample(&mut rng), grid.sample(&mut rng));
            let child = grid.mutate(&grid.crossover(&a, &b, &mut rng), 0.3, &mut rng);
            assert!(grid.contains(&child), "{child}");
        }
        assert!(!grid.contains(&SubnetSpec::new(2, vec![3, 3, 5], vec![128; 3], 384)));
    }

    #[test]
    fn elitism_keeps_the_seeded_spec() {
        let grid = GridSpace::full_scale();
        let only = SubnetSpec::grid(2, 1, 128);
        let budget = macs(&only).unwrap();
        let evo = EvolutionConfig {
            population: 10,
            mutation_rate: 0.0,
            generations: 20,
            ..EvolutionConfig::default()
        };
        let mut eval = |_: &SubnetSpec| Ok(0.05);
        let r = mpea_seeded(&grid, &mut eval, &macs_constraint(budget), &macs, &evo, &[only.clone()]).unwrap();
        assert_eq!(r.best_spec, Some(only));
        assert_eq!(r.log.len(), 21);
        assert!(r.log.iter().all(|g| g.feasible_fraction > 0.0));
    }

    #[test]
    fn infeasible_everywhere_gives_empty_result() {
        let grid = GridSpace::full_scale();
        let evo = EvolutionConfig {
            generations: 5,
            ..EvolutionConfig::default()
        };
        let mut eval = |_: &SubnetSpec| Ok(0.05);
        let r = mpea(&grid, &mut eval, &macs_constraint(1.0), &macs, &evo).unwrap();
        assert!(r.best_spec.is_none() && r.best_metrics.is_none());
        assert!(r.log.iter().all(|g| g.best.is_none()));
    }

    #[test]
    fn mpea_matches_exhaustive_optimum() {
        let grid = GridSpace::full_scale();
        let specs = enumerate_grid(&grid);
        let mut eval = oracle(&grid);
        let evo = EvolutionConfig {
            generations: 40,
            ..EvolutionConfig::default()
        };
        for budget in [3e8, 8e8, 1e12] {
            let c = macs_constraint(budget);
            let exact = grid_search(&specs, &mut eval, &c, &macs).unwrap().best_metrics.unwrap().metric;
            let mut hits = 0;
            for seed in 0..5 {
                let r = mpea(&grid, &mut eval, &c, &macs, &EvolutionConfig { seed, ..evo.clone() }).unwrap();
                let spec = r.best_spec.clone().unwrap();
                assert!(macs(&spec).unwrap() <= budget);
                hits += usize::from(r.best_metrics.unwrap().metric == exact);
                let bests: Vec<f64> = r.log.iter().filter_map(|g| g.best).collect();
                assert!(bests.windows(2).all(|w| w[1] <= w[0]));
            }
            assert!(hits >= 4, "budget {budget}: {hits}/5");
        }
    }

    #[test]
    fn mpea_on_the_coarse_space_is_feasible_and_reproducible() {
        let space = SpaceConfig::full_scale(Stage::Width2);
        let mut eval = |s: &SubnetSpec| Ok(surrogate_metrics(s, &SpaceConfig::full_scale(Stage::Width2), &full(), 0.0, 0)?.0);
        let evo = EvolutionConfig {
            generations: 15,
            seed: 2,
            ..EvolutionConfig::default()
        };
        let c = macs_constraint(6e8);
        let a = mpea(&space, &mut eval, &c, &macs, &evo).unwrap();
        let b = mpea(&space, &mut eval, &c, &macs, &evo).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert!(macs(a.best_spec.as_ref().unwrap()).unwrap() <= 6e8);
    }

    #[test]
    fn invalid_settings_rejected() {
        assert!(Constraint::new(CostMetric::Macs, 0.0, 300).is_err());
        assert!(EvolutionConfig { population: 1, ..EvolutionConfig::default() }.check().is_err());
        assert!(EvolutionConfig { mutation_rate: 1.5, ..EvolutionConfig::default() }.check().is_err());
        let c = Constraint::new(CostMetric::LatencyMs, 1.0, 300).unwrap();
        assert!(spec_cost(&full().largest(), &c, &full(), None).is_err());
    }
}
