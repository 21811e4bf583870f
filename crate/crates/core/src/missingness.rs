//! Test-time missingness simulators.
//!
//! MCAR holds out each observed entry independently. The block patterns drop
//! whole timesteps across all channels, modelling a sensor outage: fixed
//! blocks are 10% of the series length, variable blocks draw their length
//! uniformly from 5–15% of it. Blocks never overlap and never wrap.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Series};
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const FIXED_BLOCK_RATIO: f64 = 0.10;
pub const VARIABLE_BLOCK_RATIO: (f64, f64) = (0.05, 0.15);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    Mcar,
    FixedBlock,
    VariableBlock,
}

impl Pattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Mcar => "mcar",
            Pattern::FixedBlock => "fixed-block",
            Pattern::VariableBlock => "variable-block",
        }
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcar" => Ok(Pattern::Mcar),
            "fixed-block" => Ok(Pattern::FixedBlock),
            "variable-block" => Ok(Pattern::VariableBlock),
            other => Err(Error::Config(format!("unknown missingness pattern `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissingnessSpec {
    pub pattern: Pattern,
    pub rate: f64,
    pub seed: u64,
    pub fixed_ratio: f64,
    pub variable_ratio: (f64, f64),
}

impl MissingnessSpec {
    pub fn new(pattern: Pattern, rate: f64, seed: u64) -> Result<Self> {
        let spec = MissingnessSpec {
            pattern,
            rate,
            seed,
            fixed_ratio: FIXED_BLOCK_RATIO,
            variable_ratio: VARIABLE_BLOCK_RATIO,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.rate) {
            return Err(Error::Config(format!("missingness rate must be in (0, 1), got {}", self.rate)));
        }
        let (lo, hi) = self.variable_ratio;
        if !unit(self.fixed_ratio) || !unit(lo) || !unit(hi) || lo > hi {
            return Err(Error::Config("block ratios must lie in (0, 1) with lo ≤ hi".into()));
        }
        Ok(())
    }

    pub fn apply(&self, series: &Series, index: u64) -> Result<Corruption> {
        let seed = crate::rng::derive_seed(self.seed, &[index]);
        match self.pattern {
            Pattern::Mcar => apply_mcar(series, self.rate, seed),
            Pattern::FixedBlock => place_blocks(series, self.rate, seed, BlockLength::Fixed(self.fixed_ratio)),
            Pattern::VariableBlock => place_blocks(series, self.rate, seed, BlockLength::Uniform(self.variable_ratio)),
        }
    }
}

/// Result of corrupting one series.
#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    /// The input series with held-out entries marked missing and zeroed.
    pub corrupted: Series,
    /// Entry-level mask of held-out values (`[len × n_features]`).
    pub holdout: Vec<bool>,
    /// Original values, for scoring the held-out entries.
    pub truth: Vec<f64>,
    /// `(start, len)` of each placed block, in placement order; empty for MCAR.
    pub blocks: Vec<(usize, usize)>,
    /// Held-out fraction actually achieved (entries for MCAR, timesteps for blocks).
    pub achieved_rate: f64,
}

impl Corruption {
    pub fn holdout_count(&self) -> usize {
        self.holdout.iter().filter(|h| **h).count()
    }

    fn build(series: &Series, holdout: Vec<bool>, blocks: Vec<(usize, usize)>, achieved_rate: f64) -> Self {
        let mut corrupted = series.clone();
        for (i, &h) in holdout.iter().enumerate() {
            if h {
                corrupted.missing[i] = true;
                corrupted.values[i] = 0.0;
            }
        }
        Corruption {
            corrupted,
            holdout,
            truth: series.values.clone(),
            blocks,
            achieved_rate,
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("missingness rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Hold out each observed entry independently with probability `rate`.
pub fn apply_mcar(series: &Series, rate: f64, seed: u64) -> Result<Corruption> {
    check_rate(rate)?;
    let observed: Vec<usize> = (0..series.values.len()).filter(|&i| !series.missing[i]).collect();
    if observed.len() < 2 {
        return Err(Error::contract(format!(
            "series `{}` needs at least 2 observed entries for MCAR holdout",
            series.id
        )));
    }
    let mut rng = rng_for(seed, &[0x3C4]);
    let mut holdout = vec![false; series.values.len()];
    for &i in &observed {
        holdout[i] = rng.gen::<f64>() < rate;
    }
    if observed.iter().all(|&i| holdout[i]) {
        let keep = *observed.choose(&mut rng).expect("non-empty");
        warn!("MCAR holdout would remove every value of `{}`; keeping one", series.id);
        holdout[keep] = false;
    }
    let count = holdout.iter().filter(|h| **h).count();
    Ok(Corruption::build(series, holdout, Vec::new(), count as f64 / observed.len() as f64))
}

#[derive(Debug, Clone, Copy)]
enum BlockLength {
    Fixed(f64),
    Uniform((f64, f64)),
}

impl BlockLength {
    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> usize {
        let steps = |r: f64| ((r * n as f64).round() as usize).max(1);
        match self {
            BlockLength::Fixed(r) => steps(r),
            BlockLength::Uniform((lo, hi)) => rng.gen_range(steps(lo)..=steps(hi)),
        }
    }
}

pub fn apply_fixed_blocks(series: &Series, rate: f64, seed: u64) -> Result<Corruption> {
    place_blocks(series, rate, seed, BlockLength::Fixed(FIXED_BLOCK_RATIO))
}

pub fn apply_variable_blocks(series: &Series, rate: f64, seed: u64) -> Result<Corruption> {
    place_blocks(series, rate, seed, BlockLength::Uniform(VARIABLE_BLOCK_RATIO))
}

/// Longest run of free timesteps as `(start, len)`.
fn longest_free_run(free: &[bool]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = 0;
    for i in 0..=free.len() {
        if i == free.len() || !free[i] {
            let len = i - start;
            if len > 0 && best.map_or(true, |(_, l)| len > l) {
                best = Some((start, len));
            }
            start = i + 1;
        }
    }
    best
}

/// Place non-overlapping blocks of timesteps until `round(rate·n)` steps are
/// held out; the last block is truncated to hit the target exactly.
///
/// Starts are drawn uniformly and rejected on overlap, up to `10·n` draws.
/// After that, blocks go into the longest remaining free run (truncated to
/// fit). Only a fully occupied series stops short of the target.
fn place_blocks(series: &Series, rate: f64, seed: u64, lengths: BlockLength) -> Result<Corruption> {
    check_rate(rate)?;
    let n = series.len();
    if n < 10 {
        return Err(Error::contract(format!(
            "block missingness needs series of length ≥ 10, `{}` has {n}",
            series.id
        )));
    }
    let mut rng = rng_for(seed, &[0xB10C]);
    let target = (rate * n as f64).round() as usize;
    let mut free = vec![true; n];
    let mut blocks = Vec::new();
    let mut placed = 0;
    let mut draws = 0;
    let cap = 10 * n;
    while placed < target {
        let len = lengths.sample(n, &mut rng).min(target - placed);
        let mut done = false;
        while draws < cap {
            draws += 1;
            let start = rng.gen_range(0..=n - len);
            if free[start..start + len].iter().all(|f| *f) {
                free[start..start + len].iter_mut().for_each(|f| *f = false);
                blocks.push((start, len));
                placed += len;
                done = true;
                break;
            }
        }
        if done {
            continue;
        }
        match longest_free_run(&free) {
            Some((run_start, run_len)) => {
                let len = len.min(run_len);
                let start = run_start + rng.gen_range(0..=run_len - len);
                free[start..start + len].iter_mut().for_each(|f| *f = false);
                blocks.push((start, len));
                placed += len;
            }
            None => {
                warn!(
                    "block placement saturated for `{}`: {placed} of {target} steps held out",
                    series.id
                );
                break;
            }
        }
    }
    let f = series.n_features();
    let mut holdout = vec![false; series.values.len()];
    for t in (0..n).filter(|&t| !free[t]) {
        for c in 0..f {
            let i = t * f + c;
            holdout[i] = !series.missing[i];
        }
    }
    Ok(Corruption::build(series, holdout, blocks, placed as f64 / n as f64))
}

/// Corrupt every series of a dataset; series `i` uses a seed derived from
/// `(spec.seed, i)`.
pub fn corrupt_dataset(dataset: &Dataset, spec: &MissingnessSpec) -> Result<Vec<Corruption>> {
    spec.validate()?;
    dataset
        .series
        .iter()
        .enumerate()
        .map(|(i, s)| spec.apply(s, i as u64))
        .collect()
}

/// Dataset holding only the held-out ground truth (everything else missing),
/// in the same CSV layout as the input.
pub fn holdout_dataset(dataset: &Dataset, corruptions: &[Corruption]) -> Dataset {
    let mut out = dataset.clone();
    for (s, c) in out.series.iter_mut().zip(corruptions) {
        for i in 0..s.values.len() {
            s.missing[i] = !c.holdout[i];
            s.values[i] = if c.holdout[i] { c.truth[i] } else { 0.0 };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(n: usize, f: usize) -> Series {
        let values = (0..n * f).map(|i| i as f64).collect();
        Series::new("s".into(), n, f, values, vec![false; n * f], None).unwrap()
    }

    #[test]
    fn mcar_small_rate_holds_out_nothing() {
        let c = apply_mcar(&series(48, 1), 1e-9, 1).unwrap();
        assert_eq!(c.holdout_count(), 0);
    }

    #[test]
    fn mcar_high_rate_count() {
        let c = apply_mcar(&series(48, 1), 0.9, 1).unwrap();
        let k = c.holdout_count() as i64;
        assert!((k - 43).abs() <= 5, "{k}");
    }

    #[test]
    fn mcar_keeps_ground_truth_for_scoring() {
        let s = series(30, 2);
        let c = apply_mcar(&s, 0.5, 9).unwrap();
        for i in 0..s.values.len() {
            if c.holdout[i] {
                assert_eq!(c.truth[i], s.values[i]);
                assert!(c.corrupted.missing[i]);
            } else {
                assert_eq!(c.corrupted.values[i], s.values[i]);
            }
        }
    }

    #[test]
    fn mcar_never_removes_everything() {
        let s = series(2, 1);
        for seed in 0..50 {
            let c = apply_mcar(&s, 0.99, seed).unwrap();
            assert!(c.holdout_count() < 2);
        }
        let mut lone = series(3, 1);
        lone.missing = vec![true, true, false];
        assert!(apply_mcar(&lone, 0.5, 0).is_err());
    }

    #[test]
    fn fixed_blocks_match_arithmetic() {
        let c = apply_fixed_blocks(&series(40, 1), 0.5, 3).unwrap();
        assert_eq!(c.holdout_count(), 20);
        assert_eq!(c.blocks.len(), 5);
        assert!(c.blocks.iter().all(|b| b.1 == 4), "{:?}", c.blocks);

        let c = apply_fixed_blocks(&series(40, 1), 0.1, 3).unwrap();
        assert_eq!(c.blocks, vec![(c.blocks[0].0, 4)]);
        assert_eq!(c.holdout_count(), 4);
    }

    #[test]
    fn blocks_never_overlap() {
        for seed in 0..30 {
            for pattern in [Pattern::FixedBlock, Pattern::VariableBlock] {
                let spec = MissingnessSpec::new(pattern, 0.7, seed).unwrap();
                let c = spec.apply(&series(40, 2), 0).unwrap();
                let total: usize = c.blocks.iter().map(|b| b.1).sum();
                assert_eq!(c.holdout_count(), total * 2);
                let mut covered = vec![0; 40];
                for (s, l) in &c.blocks {
                    for t in *s..s + l {
                        covered[t] += 1;
                    }
                }
                assert!(covered.iter().all(|c| *c <= 1));
            }
        }
    }

    #[test]
    fn variable_block_lengths_in_range() {
        for seed in 0..30 {
            let c = apply_variable_blocks(&series(40, 1), 0.5, seed).unwrap();
            let (last, rest) = c.blocks.split_last().unwrap();
            assert!(rest.iter().all(|b| (2..=6).contains(&b.1)), "{:?}", c.blocks);
            assert!((1..=6).contains(&last.1));
            assert!((c.achieved_rate - 0.5).abs() <= 6.0 / 40.0);
        }
    }

    #[test]
    fn determinism_under_seed() {
        let s = series(40, 2);
        for pattern in [Pattern::Mcar, Pattern::FixedBlock, Pattern::VariableBlock] {
            let spec = MissingnessSpec::new(pattern, 0.4, 77).unwrap();
            assert_eq!(spec.apply(&s, 3).unwrap(), spec.apply(&s, 3).unwrap());
        }
    }

    #[test]
    fn natural_missing_is_never_held_out() {
        let mut s = series(40, 2);
        for i in (0..80).step_by(3) {
            s.missing[i] = true;
        }
        for pattern in [Pattern::Mcar, Pattern::FixedBlock, Pattern::VariableBlock] {
            let c = MissingnessSpec::new(pattern, 0.6, 5).unwrap().apply(&s, 0).unwrap();
            for i in 0..80 {
                assert!(!(c.holdout[i] && s.missing[i]));
            }
        }
    }

    #[test]
    fn achieved_rates_track_targets() {
        let s = series(48, 2);
        for k in 1..=9 {
            let rate = k as f64 / 10.0;
            for pattern in [Pattern::Mcar, Pattern::FixedBlock, Pattern::VariableBlock] {
                let c = MissingnessSpec::new(pattern, rate, k).unwrap().apply(&s, 0).unwrap();
                let tol = match pattern {
                    // 3σ of a binomial proportion over 96 entries.
                    Pattern::Mcar => 3.0 * (rate * (1.0 - rate) / 96.0).sqrt(),
                    _ => 0.05,
                };
                assert!((c.achieved_rate - rate).abs() <= tol, "{pattern} {rate}: {}", c.achieved_rate);
            }
        }
    }

    #[test]
    fn short_series_rejected_for_blocks() {
        assert!(apply_fixed_blocks(&series(9, 1), 0.5, 0).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(MissingnessSpec::new(Pattern::Mcar, 0.0, 0).is_err());
        assert!(MissingnessSpec::new(Pattern::Mcar, 1.0, 0).is_err());
        assert!("fixed-block".parse::<Pattern>().is_ok());
        assert!("blocks".parse::<Pattern>().is_err());
    }
}
