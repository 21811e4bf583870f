//! Classical imputation baselines: per-channel mean, last observation carried
//! forward, and linear interpolation. Observed entries are never modified.

use std::str::FromStr;

use crate::data::Series;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Baseline {
    Mean,
    Last,
    Linear,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Mean => "mean",
            Baseline::Last => "last",
            Baseline::Linear => "linear",
        }
    }

    /// Impute a set of series; channels with no observation in a series fall
    /// back to the channel mean across the whole set.
    pub fn impute(self, series: &[Series]) -> Vec<Vec<f64>> {
        let fallback = channel_means(series);
        series
            .iter()
            .map(|s| match self {
                Baseline::Mean => impute_mean(s, &fallback),
                Baseline::Last => impute_last(s, &fallback),
                Baseline::Linear => impute_linear(s, &fallback),
            })
            .collect()
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Baseline::Mean),
            "last" => Ok(Baseline::Last),
            "linear" => Ok(Baseline::Linear),
            other => Err(Error::Config(format!("unknown baseline `{other}`"))),
        }
    }
}

/// Observed mean of each channel across `series`; 0 for channels never observed.
pub fn channel_means(series: &[Series]) -> Vec<f64> {
    let f = series.first().map_or(0, Series::n_features);
    let mut sum = vec![0.0; f];
    let mut count = vec![0usize; f];
    for s in series {
        for (i, (&v, &m)) in s.values.iter().zip(&s.missing).enumerate() {
            if !m {
                sum[i % f] += v;
                count[i % f] += 1;
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect()
}

/// Observed `(t, value)` pairs of one channel.
fn observed(s: &Series, c: usize) -> Vec<(usize, f64)> {
    (0..s.len()).filter(|&t| !s.is_missing(t, c)).map(|t| (t, s.value(t, c))).collect()
}

/// Per-channel observed mean written into missing slots.
pub fn impute_mean(s: &Series, fallback: &[f64]) -> Vec<f64> {
    let f = s.n_features();
    let mut out = s.values.clone();
    for c in 0..f {
        let obs = observed(s, c);
        let fill = if obs.is_empty() {
            fallback[c]
        } else {
            obs.iter().map(|p| p.1).sum::<f64>() / obs.len() as f64
        };
        for t in 0..s.len() {
            if s.is_missing(t, c) {
                out[t * f + c] = fill;
            }
        }
    }
    out
}

/// Forward fill; leading gaps take the first observation.
pub fn impute_last(s: &Series, fallback: &[f64]) -> Vec<f64> {
    let f = s.n_features();
    let mut out = s.values.clone();
    for c in 0..f {
        let mut last = observed(s, c).first().map_or(fallback[c], |p| p.1);
        for t in 0..s.len() {
            if s.is_missing(t, c) {
                out[t * f + c] = last;
            } else {
                last = s.value(t, c);
            }
        }
    }
    out
}

/// Linear interpolation between flanking observations; the ends are clamped
/// to the nearest observation.
pub fn impute_linear(s: &Series, fallback: &[f64]) -> Vec<f64> {
    let f = s.n_features();
    let mut out = s.values.clone();
    for c in 0..f {
        let obs = observed(s, c);
        if obs.is_empty() {
            for t in 0..s.len() {
                out[t * f + c] = fallback[c];
            }
            continue;
        }
        let mut next = 0;
        for t in 0..s.len() {
            while next < obs.len() && obs[next].0 < t {
                next += 1;
            }
            if !s.is_missing(t, c) {
                continue;
            }
            out[t * f + c] = match (next.checked_sub(1).map(|i| obs[i]), obs.get(next)) {
                (Some((t0, v0)), Some(&(t1, v1))) => {
                    let w = (t - t0) as f64 / (t1 - t0) as f64;
                    v0 + w * (v1 - v0)
                }
                (Some((_, v0)), None) => v0,
                (None, Some(&(_, v1))) => v1,
                (None, None) => unreachable!("channel has observations"),
            };
        }
    }
    out
}
