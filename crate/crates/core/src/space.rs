//! Architecture space: subnet encoding, validation, sampling and sizes.
//!
//! A subnet is the tuple `(depth, kernels, widths, width_back)` where the
//! kernel and front-width lists cover the stem plus every active block
//! (`depth + 1` entries) and `width_back` is the transformation width.
//! Skipped blocks are always the trailing ones.

use std::fmt;

use num_bigint::BigUint;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of blocks the supernet can hold.
pub const MAX_DEPTH: usize = 4;

/// Width multipliers used by the coarse-grained space, in percent.
pub const COARSE_MULTIPLIERS: [usize; 5] = [25, 35, 50, 75, 100];

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubnetSpec {
    pub depth: usize,
    pub kernels: Vec<usize>,
    #[serde(rename = "widths")]
    pub widths_front: Vec<usize>,
    pub width_back: usize,
}

impl SubnetSpec {
    pub fn new(depth: usize, kernels: Vec<usize>, widths_front: Vec<usize>, width_back: usize) -> Self {
        Self {
            depth,
            kernels,
            widths_front,
            width_back,
        }
    }

    /// Uniform spec: every kernel `k`, every front width `c`.
    pub fn uniform(depth: usize, kernel: usize, width: usize, width_back: usize) -> Self {
        Self::new(depth, vec![kernel; depth + 1], vec![width; depth + 1], width_back)
    }

    /// Grid-space member `(D, {K}, {C} ∪ {3C})`.
    pub fn grid(depth: usize, kernel: usize, width: usize) -> Self {
        Self::uniform(depth, kernel, width, 3 * width)
    }

    /// Stem width, i.e. the channel count carried between blocks.
    pub fn stem_width(&self) -> usize {
        self.widths_front[0]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    /// Stable 64-bit hash of the JSON form.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.to_json().as_bytes())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3))
}

impl fmt::Display for SubnetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        write!(
            f,
            "({}, {{{}}}, {{{}}}, {})",
            self.depth,
            join(&self.kernels),
            join(&self.widths_front),
            self.width_back
        )
    }
}

/// Training stage; each one widens the sampling space of the previous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Largest,
    Kernel,
    Depth,
    Width1,
    Width2,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Largest, Stage::Kernel, Stage::Depth, Stage::Width1, Stage::Width2];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Largest => "largest",
            Stage::Kernel => "kernel",
            Stage::Depth => "depth",
            Stage::Width1 => "width1",
            Stage::Width2 => "width2",
        }
    }

    pub fn next(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|s| *s == self)?;
        Stage::ALL.get(i + 1).copied()
    }

    fn kernel_dynamic(self) -> bool {
        self >= Stage::Kernel
    }

    fn depth_dynamic(self) -> bool {
        self >= Stage::Depth
    }

    /// Width multipliers (percent of maximum) sampled in this stage.
    fn width_multipliers(self) -> &'static [usize] {
        match self {
            Stage::Largest | Stage::Kernel | Stage::Depth => &COARSE_MULTIPLIERS[4..],
            Stage::Width1 => &COARSE_MULTIPLIERS[2..],
            Stage::Width2 => &COARSE_MULTIPLIERS,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub depth_options: Vec<usize>,
    pub kernel_options: Vec<usize>,
    pub width_front_options: Vec<usize>,
    pub width_back_options: Vec<usize>,
    pub granularity_c: usize,
    pub stage: Stage,
}

/// Rounds `max * percent / 100` down to a multiple of `c`.
pub fn quantize_width(max: usize, percent: usize, c: usize) -> usize {
    (max * percent / 100) / c * c
}

impl SpaceConfig {
    /// Coarse-grained space derived from width multipliers, restricted to
    /// what `stage` samples.
    pub fn coarse(max_front: usize, max_back: usize, granularity_c: usize, stage: Stage) -> Result<Self> {
        let widths = |max: usize| {
            stage
                .width_multipliers()
                .iter()
                .map(|p| quantize_width(max, *p, granularity_c))
                .collect::<Vec<_>>()
        };
        let cfg = Self {
            depth_options: if stage.depth_dynamic() { vec![2, 3, 4] } else { vec![4] },
            kernel_options: if stage.kernel_dynamic() { vec![1, 3, 5] } else { vec![5] },
            width_front_options: widths(max_front),
            width_back_options: widths(max_back),
            granularity_c,
            stage,
        };
        cfg.check()?;
        Ok(cfg)
    }

    /// Full-scale coarse space (512 front, 1536 back, step 8).
    pub fn full_scale(stage: Stage) -> Self {
        Self::coarse(512, 1536, 8, stage).expect("full-scale space is valid")
    }

    /// Every width from `min` to `max` in steps of `c`, all dimensions dynamic.
    pub fn stepped(front: (usize, usize), back: (usize, usize), c: usize) -> Result<Self> {
        if c == 0 {
            return Err(Error::Config("granularity must be positive".into()));
        }
        let cfg = Self {
            depth_options: vec![2, 3, 4],
            kernel_options: vec![1, 3, 5],
            width_front_options: (front.0..=front.1).step_by(c).collect(),
            width_back_options: (back.0..=back.1).step_by(c).collect(),
            granularity_c: c,
            stage: Stage::Width2,
        };
        cfg.check()?;
        Ok(cfg)
    }

    /// Fine-grained full-scale space with step `c`.
    pub fn full_scale_stepped(c: usize) -> Result<Self> {
        Self::stepped((128, 512), (384, 1536), c)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, opts) in [
            ("depth", &self.depth_options),
            ("kernel", &self.kernel_options),
            ("front width", &self.width_front_options),
            ("back width", &self.width_back_options),
        ] {
            if opts.is_empty() {
                return bad(format!("{name} options are empty"));
            }
            if opts.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{name} options must be strictly increasing"));
            }
        }
        if self.granularity_c == 0 {
            return bad("granularity must be positive".into());
        }
        if self.depth_options.iter().any(|d| *d == 0 || *d > MAX_DEPTH) {
            return bad(format!("depth options must lie in 1..={MAX_DEPTH}"));
        }
        if self.kernel_options.iter().any(|k| k % 2 == 0 || *k > 5) {
            return bad("kernel options must be odd and at most 5".into());
        }
        let c = self.granularity_c;
        if self
            .width_front_options
            .iter()
            .chain(&self.width_back_options)
            .any(|w| *w == 0 || w % c != 0)
        {
            return bad(format!("widths must be positive multiples of {c}"));
        }
        if self.stage == Stage::Largest
            && [
                &self.depth_options,
                &self.kernel_options,
                &self.width_front_options,
                &self.width_back_options,
            ]
            .iter()
            .any(|o| o.len() != 1)
        {
            return bad("the largest stage samples a single architecture".into());
        }
        Ok(())
    }

    pub fn max_depth(&self) -> usize {
        *self.depth_options.last().expect("non-empty")
    }

    /// Kernel and front-width positions in the largest architecture.
    pub fn max_positions(&self) -> usize {
        self.max_depth() + 1
    }

    /// Option-set inclusion in every dimension.
    pub fn is_subspace_of(&self, other: &SpaceConfig) -> bool {
        let sub = |a: &[usize], b: &[usize]| a.iter().all(|x| b.contains(x));
        sub(&self.depth_options, &other.depth_options)
            && sub(&self.kernel_options, &other.kernel_options)
            && sub(&self.width_front_options, &other.width_front_options)
            && sub(&self.width_back_options, &other.width_back_options)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: SpaceConfig = serde_json::from_str(s)?;
        cfg.check()?;
        Ok(cfg)
    }
}

/// First constraint a spec breaks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Depth { depth: usize },
    KernelCount { expected: usize, found: usize },
    WidthCount { expected: usize, found: usize },
    Kernel { position: usize, kernel: usize },
    FrontWidth { position: usize, width: usize },
    BackWidth { width: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Depth { depth } => write!(f, "depth {depth} is not an allowed option"),
            Violation::KernelCount { expected, found } => {
                write!(f, "expected {expected} kernels, found {found}")
            }
            Violation::WidthCount { expected, found } => {
                write!(f, "expected {expected} front widths, found {found}")
            }
            Violation::Kernel { position, kernel } => {
                write!(f, "kernel {kernel} at cell {} is not an allowed option", position + 1)
            }
            Violation::FrontWidth { position, width } => {
                write!(f, "width {width} at cell {} is not an allowed option", position + 1)
            }
            Violation::BackWidth { width } => write!(f, "back width {width} is not an allowed option"),
        }
    }
}

pub fn validate(spec: &SubnetSpec, config: &SpaceConfig) -> std::result::Result<(), Violation> {
    if !config.depth_options.contains(&spec.depth) {
        return Err(Violation::Depth { depth: spec.depth });
    }
    let n = spec.depth + 1;
    if spec.kernels.len() != n {
        return Err(Violation::KernelCount {
            expected: n,
            found: spec.kernels.len(),
        });
    }
    if spec.widths_front.len() != n {
        return Err(Violation::WidthCount {
            expected: n,
            found: spec.widths_front.len(),
        });
    }
    if let Some((position, &kernel)) = spec
        .kernels
        .iter()
        .enumerate()
        .find(|(_, k)| !config.kernel_options.contains(k))
    {
        return Err(Violation::Kernel { position, kernel });
    }
    if let Some((position, &width)) = spec
        .widths_front
        .iter()
        .enumerate()
        .find(|(_, w)| !config.width_front_options.contains(w))
    {
        return Err(Violation::FrontWidth { position, width });
    }
    if !config.width_back_options.contains(&spec.width_back) {
        return Err(Violation::BackWidth { width: spec.width_back });
    }
    Ok(())
}

/// Like [`validate`] but as a crate error.
pub fn ensure_valid(spec: &SubnetSpec, config: &SpaceConfig) -> Result<()> {
    validate(spec, config).map_err(Error::InvalidSpec)
}

/// Exact number of subnets in the space.
pub fn space_size(config: &SpaceConfig) -> BigUint {
    let k = BigUint::from(config.kernel_options.len());
    let w = BigUint::from(config.width_front_options.len());
    let b = BigUint::from(config.width_back_options.len());
    let per_cell = &k * &w;
    config
        .depth_options
        .iter()
        .map(|d| per_cell.pow((*d + 1) as u32) * &b)
        .sum()
}

/// Number of independent dimensions allowed to vary.
pub fn degrees_of_freedom(config: &SpaceConfig) -> usize {
    let positions = config.max_positions();
    let dynamic = |o: &[usize]| o.len() > 1;
    let mut dof = 0;
    if dynamic(&config.depth_options) {
        dof += 1;
    }
    if dynamic(&config.kernel_options) {
        dof += positions;
    }
    if dynamic(&config.width_front_options) {
        dof += positions;
    }
    if dynamic(&config.width_back_options) {
        dof += 1;
    }
    dof
}

/// Seeded, counter-addressed sampler: draw `n` is a pure function of
/// `(rng_seed, n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub rng_seed: u64,
    pub draw_count: u64,
}

impl SamplerState {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            rng_seed,
            draw_count: 0,
        }
    }

    /// RNG for the next draw; advances the counter.
    pub fn next_rng(&mut self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(self.draw_count);
        self.draw_count += 1;
        rng
    }
}

fn pick<R: Rng>(rng: &mut R, options: &[usize]) -> usize {
    options[rng.gen_range(0..options.len())]
}

/// Draws every dynamic dimension independently and uniformly.
pub fn sample_subnet(config: &SpaceConfig, state: &mut SamplerState) -> SubnetSpec {
    let mut rng = state.next_rng();
    sample_with(config, &mut rng)
}

pub fn sample_with<R: Rng>(config: &SpaceConfig, rng: &mut R) -> SubnetSpec {
    let depth = pick(rng, &config.depth_options);
    let kernels = (0..=depth).map(|_| pick(rng, &config.kernel_options)).collect();
    let widths = (0..=depth).map(|_| pick(rng, &config.width_front_options)).collect();
    let back = pick(rng, &config.width_back_options);
    SubnetSpec::new(depth, kernels, widths, back)
}

/// Smallest and largest subnets of the space.
pub fn bounds(config: &SpaceConfig) -> (SubnetSpec, SubnetSpec) {
    let first = |o: &[usize]| o[0];
    let last = |o: &[usize]| *o.last().expect("non-empty");
    let lo = SubnetSpec::uniform(
        first(&config.depth_options),
        first(&config.kernel_options),
        first(&config.width_front_options),
        first(&config.width_back_options),
    );
    let hi = SubnetSpec::uniform(
        last(&config.depth_options),
        last(&config.kernel_options),
        last(&config.width_front_options),
        last(&config.width_back_options),
    );
    (lo, hi)
}

/// One-hot encoding: depth block, then one block per kernel position,
/// per front-width position, then the back width. Skipped positions are
/// all-zero blocks.
pub fn encode_onehot(spec: &SubnetSpec, config: &SpaceConfig) -> Result<Vec<f64>> {
    ensure_valid(spec, config)?;
    let positions = config.max_positions();
    let mut out = Vec::with_capacity(encoding_len(config));
    let push_block = |out: &mut Vec<f64>, options: &[usize], value: Option<usize>| {
        out.extend(options.iter().map(|o| if Some(*o) == value { 1.0 } else { 0.0 }));
    };
    push_block(&mut out, &config.depth_options, Some(spec.depth));
    for p in 0..positions {
        push_block(&mut out, &config.kernel_options, spec.kernels.get(p).copied());
    }
    for p in 0..positions {
        push_block(&mut out, &config.width_front_options, spec.widths_front.get(p).copied());
    }
    push_block(&mut out, &config.width_back_options, Some(spec.width_back));
    Ok(out)
}

pub fn encoding_len(config: &SpaceConfig) -> usize {
    let p = config.max_positions();
    config.depth_options.len()
        + p * config.kernel_options.len()
        + p * config.width_front_options.len()
        + config.width_back_options.len()
}

/// Uniform grid `(D, {K}, {C} ∪ {3C})` used for exhaustive search.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpace {
    pub depths: Vec<usize>,
    pub kernels: Vec<usize>,
    pub widths: Vec<usize>,
}

impl GridSpace {
    /// Depth {2,3,4}, kernel {1,3,5}, width 128..=512 step 8.
    pub fn full_scale() -> Self {
        Self {
            depths: vec![2, 3, 4],
            kernels: vec![1, 3, 5],
            widths: (128..=512).step_by(8).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.depths.len() * self.kernels.len() * self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fine-grained space every grid member belongs to.
    pub fn space(&self) -> Result<SpaceConfig> {
        let c = self
            .widths
            .windows(2)
            .map(|w| w[1] - w[0])
            .chain(self.widths.iter().copied())
            .fold(0, gcd);
        let cfg = SpaceConfig {
            depth_options: self.depths.clone(),
            kernel_options: self.kernels.clone(),
            width_front_options: self.widths.clone(),
            width_back_options: self.widths.iter().map(|w| 3 * w).collect(),
            granularity_c: c.max(1),
            stage: Stage::Width2,
        };
        cfg.check()?;
        Ok(cfg)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// All grid members in lexicographic `(D, K, C)` order.
pub fn enumerate_grid(grid: &GridSpace) -> Vec<SubnetSpec> {
    let mut out = Vec::with_capacity(grid.len());
    for &d in &grid.depths {
        for &k in &grid.kernels {
            for &c in &grid.widths {
                out.push(SubnetSpec::grid(d, k, c));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn a_max() -> SubnetSpec {
        SubnetSpec::uniform(4, 5, 512, 1536)
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
        assert_ne!(a_max().fingerprint(), SubnetSpec::uniform(4, 5, 512, 1528).fingerprint());
    }

    #[test]
    fn validate_examples() {
        let full = SpaceConfig::full_scale(Stage::Width2);
        assert_eq!(validate(&a_max(), &full), Ok(()));
        assert_eq!(validate(&SubnetSpec::uniform(2, 1, 128, 384), &full), Ok(()));
        let too_deep = SubnetSpec::uniform(5, 3, 256, 768);
        assert_eq!(validate(&too_deep, &full), Err(Violation::Depth { depth: 5 }));
    }

    #[test]
    fn validate_reports_first_violation() {
        let full = SpaceConfig::full_scale(Stage::Width2);
        let mut s = SubnetSpec::uniform(3, 3, 256, 768);
        s.kernels.pop();
        assert_eq!(
            validate(&s, &full),
            Err(Violation::KernelCount { expected: 4, found: 3 })
        );
        let mut s = SubnetSpec::uniform(3, 3, 256, 768);
        s.kernels[2] = 7;
        s.widths_front[1] = 200;
        assert_eq!(validate(&s, &full), Err(Violation::Kernel { position: 2, kernel: 7 }));
        let mut s = SubnetSpec::uniform(3, 3, 256, 768);
        s.widths_front[1] = 200;
        assert_eq!(validate(&s, &full), Err(Violation::FrontWidth { position: 1, width: 200 }));
        let s = SubnetSpec::uniform(3, 3, 256, 770);
        assert_eq!(validate(&s, &full), Err(Violation::BackWidth { width: 770 }));
    }

    #[test]
    fn coarse_widths_round_down_to_eight() {
        let full = SpaceConfig::full_scale(Stage::Width2);
        assert_eq!(full.width_front_options, vec![128, 176, 256, 384, 512]);
        assert_eq!(full.width_back_options, vec![384, 536, 768, 1152, 1536]);
    }

    #[test]
    fn stage_sizes() {
        let sizes: Vec<u64> = Stage::ALL
            .iter()
            .map(|s| space_size(&SpaceConfig::full_scale(*s)).try_into().unwrap())
            .collect();
        assert_eq!(sizes, vec![1, 243, 351, 199_017, 4_066_875]);
    }

    #[test]
    fn stepped_space_sizes() {
        let c128 = SpaceConfig::full_scale_stepped(128).unwrap();
        assert_eq!(c128.width_front_options.len(), 4);
        assert_eq!(c128.width_back_options.len(), 10);
        assert_eq!(space_size(&c128), BigUint::from(2_712_960u64));

        let c8 = SpaceConfig::full_scale_stepped(8).unwrap();
        let expected: BigUint = (3u32..=5).map(|d| BigUint::from(147u32).pow(d) * 145u32).sum();
        assert_eq!(space_size(&c8), expected);
        let approx: f64 = expected.to_string().parse().unwrap();
        assert!((approx / 1e13 - 1.0).abs() < 0.05, "{approx}");
    }

    #[test]
    fn degrees_of_freedom_examples() {
        assert_eq!(degrees_of_freedom(&SpaceConfig::full_scale(Stage::Width2)), 12);
        assert_eq!(degrees_of_freedom(&SpaceConfig::full_scale(Stage::Kernel)), 5);
        let depth_only = SpaceConfig {
            kernel_options: vec![5],
            ..SpaceConfig::full_scale(Stage::Largest)
        };
        let depth_only = SpaceConfig {
            depth_options: vec![2, 3, 4],
            stage: Stage::Depth,
            ..depth_only
        };
        assert_eq!(degrees_of_freedom(&depth_only), 1);
        assert_eq!(degrees_of_freedom(&SpaceConfig::full_scale(Stage::Largest)), 0);
    }

    #[test]
    fn largest_stage_always_samples_a_max() {
        let cfg = SpaceConfig::full_scale(Stage::Largest);
        let mut st = SamplerState::new(3);
        for _ in 0..20 {
            assert_eq!(sample_subnet(&cfg, &mut st), a_max());
        }
    }

    #[test]
    fn kernel_stage_samples_only_kernels() {
        let cfg = SpaceConfig::full_scale(Stage::Kernel);
        let mut st = SamplerState::new(11);
        for _ in 0..50 {
            let s = sample_subnet(&cfg, &mut st);
            assert_eq!(s.depth, 4);
            assert!(s.widths_front.iter().all(|w| *w == 512));
            assert_eq!(s.width_back, 1536);
            assert!(s.kernels.iter().all(|k| [1, 3, 5].contains(k)));
        }
    }

    #[test]
    fn sampler_is_counter_addressed() {
        let cfg = SpaceConfig::full_scale(Stage::Width2);
        let mut a = SamplerState::new(5);
        let first: Vec<_> = (0..10).map(|_| sample_subnet(&cfg, &mut a)).collect();
        let mut b = SamplerState {
            rng_seed: 5,
            draw_count: 7,
        };
        assert_eq!(sample_subnet(&cfg, &mut b), first[7]);
    }

    fn chi_square(counts: &[usize]) -> f64 {
        let n: usize = counts.iter().sum();
        let e = n as f64 / counts.len() as f64;
        counts.iter().map(|c| (*c as f64 - e).powi(2) / e).sum()
    }

    #[test]
    fn sampling_is_uniform_per_dimension() {
        let cfg = SpaceConfig::full_scale(Stage::Width2);
        let mut st = SamplerState::new(2024);
        let mut depth = [0usize; 3];
        let mut kernel = [0usize; 3];
        let mut front = [0usize; 5];
        let mut back = [0usize; 5];
        let idx = |o: &[usize], v: usize| o.iter().position(|x| *x == v).unwrap();
        for _ in 0..30_000 {
            let s = sample_subnet(&cfg, &mut st);
            depth[s.depth - 2] += 1;
            kernel[s.kernels[0] / 2] += 1;
            front[idx(&cfg.width_front_options, s.widths_front[0])] += 1;
            back[idx(&cfg.width_back_options, s.width_back)] += 1;
        }
        for k in kernel {
            let f = k as f64 / 30_000.0;
            assert!((0.323..=0.343).contains(&f), "{f}");
        }
        // chi-square critical values at p = 0.01
        assert!(chi_square(&depth) < 9.21);
        assert!(chi_square(&kernel) < 9.21);
        assert!(chi_square(&front) < 13.28);
        assert!(chi_square(&back) < 13.28);
    }

    #[test]
    fn grid_enumeration() {
        let grid = GridSpace::full_scale();
        let all = enumerate_grid(&grid);
        assert_eq!(all.len(), 441);
        assert!(all.contains(&SubnetSpec::grid(3, 3, 384)));
        assert_eq!(all[0], SubnetSpec::grid(2, 1, 128));
        assert_eq!(all[440], SubnetSpec::grid(4, 5, 512));
        let mut sorted = all.clone();
        sorted.sort_by_key(|s| (s.depth, s.kernels[0], s.widths_front[0]));
        assert_eq!(sorted, all);

        let small = GridSpace {
            widths: vec![128],
            ..GridSpace::full_scale()
        };
        assert_eq!(enumerate_grid(&small).len(), 9);
        let space = grid.space().unwrap();
        assert!(all.iter().all(|s| validate(s, &space).is_ok()));
    }

    #[test]
    fn onehot_layout() {
        let cfg = SpaceConfig::full_scale(Stage::Width2);
        assert_eq!(encoding_len(&cfg), 48);
        let v = encode_onehot(&a_max(), &cfg).unwrap();
        assert_eq!(v.len(), 48);
        assert_eq!(v.iter().sum::<f64>(), 12.0);

        let d2 = SubnetSpec::uniform(2, 3, 256, 768);
        let v = encode_onehot(&d2, &cfg).unwrap();
        // kernel blocks for positions 4 and 5
        assert!(v[3 + 9..3 + 15].iter().all(|x| *x == 0.0));
        // width blocks for positions 4 and 5
        assert!(v[18 + 15..18 + 25].iter().all(|x| *x == 0.0));
        assert!(encode_onehot(&SubnetSpec::uniform(5, 3, 256, 768), &cfg).is_err());
    }

    #[test]
    fn onehot_injective_on_grid() {
        let grid = GridSpace::full_scale();
        let cfg = grid.space().unwrap();
        let codes: BTreeSet<Vec<u8>> = enumerate_grid(&grid)
            .iter()
            .map(|s| encode_onehot(s, &cfg).unwrap().iter().map(|x| *x as u8).collect())
            .collect();
        assert_eq!(codes.len(), 441);
    }

    #[test]
    fn bounds_examples() {
        let (lo, hi) = bounds(&SpaceConfig::full_scale(Stage::Width2));
        assert_eq!(lo, SubnetSpec::uniform(2, 1, 128, 384));
        assert_eq!(hi, a_max());
        let (lo, _) = bounds(&SpaceConfig::full_scale(Stage::Kernel));
        assert_eq!(lo, SubnetSpec::uniform(4, 1, 512, 1536));
        let (lo, _) = bounds(&SpaceConfig::full_scale(Stage::Width1));
        assert_eq!(lo, SubnetSpec::uniform(2, 1, 256, 768));
    }

    #[test]
    fn stage_spaces_are_nested() {
        for w in Stage::ALL.windows(2) {
            let a = SpaceConfig::full_scale(w[0]);
            let b = SpaceConfig::full_scale(w[1]);
            assert!(a.is_subspace_of(&b), "{} ⊄ {}", w[0], w[1]);
            assert!(!b.is_subspace_of(&a));
        }
    }

    #[test]
    fn json_shapes() {
        let s = SubnetSpec::uniform(2, 3, 256, 768);
        assert_eq!(
            s.to_json(),
            r#"{"depth":2,"kernels":[3,3,3],"widths":[256,256,256],"width_back":768}"#
        );
        let cfg = SpaceConfig::full_scale(Stage::Width1);
        let round = SpaceConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(round, cfg);
        assert!(SpaceConfig::from_json(r#"{"depth_options":[2],"kernel_options":[3],"width_front_options":[16,8],"width_back_options":[24],"granularity_c":8,"stage":"width2"}"#).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn samples_validate_and_lie_within_bounds(seed in any::<u64>(), stage in 0usize..5) {
                let cfg = SpaceConfig::full_scale(Stage::ALL[stage]);
                let (lo, hi) = bounds(&cfg);
                let mut st = SamplerState::new(seed);
                for _ in 0..8 {
                    let s = sample_subnet(&cfg, &mut st);
                    prop_assert!(validate(&s, &cfg).is_ok());
                    prop_assert!(lo.depth <= s.depth && s.depth <= hi.depth);
                    prop_assert!(s.kernels.iter().all(|k| lo.kernels[0] <= *k && *k <= hi.kernels[0]));
                    prop_assert!(s.widths_front.iter().all(|w| lo.widths_front[0] <= *w && *w <= hi.widths_front[0]));
                    prop_assert!(lo.width_back <= s.width_back && s.width_back <= hi.width_back);
                }
            }

            #[test]
            fn size_matches_enumeration(d in 1usize..3, k in 1usize..3, w in 1usize..3, b in 1usize..3) {
                let cfg = SpaceConfig {
                    depth_options: (2..2 + d).collect(),
                    kernel_options: [1, 3, 5][..k].to_vec(),
                    width_front_options: (1..=w).map(|i| 8 * i).collect(),
                    width_back_options: (1..=b).map(|i| 24 * i).collect(),
                    granularity_c: 8,
                    stage: Stage::Width2,
                };
                let mut seen = BTreeSet::new();
                for &depth in &cfg.depth_options {
                    let n = depth + 1;
                    let cells = cfg.kernel_options.len() * cfg.width_front_options.len();
                    for code in 0..cells.pow(n as u32) {
                        let mut c = code;
                        let mut ks = vec![];
                        let mut ws = vec![];
                        for _ in 0..n {
                            let cell = c % cells;
                            c /= cells;
                            ks.push(cfg.kernel_options[cell % cfg.kernel_options.len()]);
                            ws.push(cfg.width_front_options[cell / cfg.kernel_options.len()]);
                        }
                        for &back in &cfg.width_back_options {
                            seen.insert(SubnetSpec::new(depth, ks.clone(), ws.clone(), back));
                        }
                    }
                }
                prop_assert_eq!(BigUint::from(seen.len()), space_size(&cfg));
            }
        }
    }
}
