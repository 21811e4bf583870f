//! Sparse probability mappings: sparsemax and sparsegen-lin.
//!
//! Sparsemax is the Euclidean projection of a score vector onto the
//! probability simplex. Sparsegen-lin minimises `‖p − a‖² − λ‖p‖²` over the
//! simplex; for `λ < 1` its solution is `sparsemax(a / (1 − λ))`, which is how
//! it is computed here. Entries at or below the mask sentinel never enter the
//! support.

use crate::error::{Error, Result};
use crate::tensor::is_masked;

/// A point on the probability simplex together with its support and the
/// truncation threshold that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDistribution {
    pub p: Vec<f64>,
    pub support: Vec<usize>,
    pub tau: f64,
    /// `1 / (1 − λ)`; 1 for plain sparsemax.
    pub scale: f64,
}

impl SparseDistribution {
    pub fn support_size(&self) -> usize {
        self.support.len()
    }
}

/// Threshold of the simplex projection over the unmasked entries of `a`.
/// Returns `None` when every entry is masked.
fn threshold(a: &[f64], sorted: &mut Vec<f64>) -> Option<f64> {
    sorted.clear();
    sorted.extend(a.iter().copied().filter(|&x| !is_masked(x)));
    if sorted.is_empty() {
        return None;
    }
    sorted.sort_by(|x, y| y.total_cmp(x));
    let mut cumsum = 0.0;
    let mut k_sum = 0.0;
    let mut k = 0usize;
    for (idx, &z) in sorted.iter().enumerate() {
        cumsum += z;
        let kk = (idx + 1) as f64;
        if 1.0 + kk * z > cumsum {
            k = idx + 1;
            k_sum = cumsum;
        }
    }
    Some((k_sum - 1.0) / k as f64)
}

fn check_scores(a: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::contract("sparsemax of an empty vector"));
    }
    if a.iter().any(|x| x.is_nan()) {
        return Err(Error::contract("sparsemax input contains NaN"));
    }
    Ok(())
}

fn project(a: &[f64], scale: f64) -> Result<SparseDistribution> {
    check_scores(a)?;
    let scaled: Vec<f64> = a
        .iter()
        .map(|&x| if is_masked(x) { x } else { x * scale })
        .collect();
    let mut buf = Vec::with_capacity(a.len());
    let tau = threshold(&scaled, &mut buf).ok_or(Error::DegenerateRow { row: 0 })?;
    let p: Vec<f64> = scaled
        .iter()
        .map(|&z| if is_masked(z) { 0.0 } else { (z - tau).max(0.0) })
        .collect();
    let support = p
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(SparseDistribution { p, support, tau, scale })
}

pub fn sparsemax(a: &[f64]) -> Result<SparseDistribution> {
    project(a, 1.0)
}

pub fn sparsegen_lin(a: &[f64], lambda: f64) -> Result<SparseDistribution> {
    check_lambda(lambda)?;
    project(a, 1.0 / (1.0 - lambda))
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda < 1.0) || !lambda.is_finite() {
        return Err(Error::contract(format!(
            "sparsegen coefficient must be finite and < 1, got {lambda}"
        )));
    }
    Ok(())
}

/// Vector-Jacobian product of sparsemax / sparsegen-lin at `dist`.
pub fn sparsemax_backward(dist: &SparseDistribution, upstream: &[f64]) -> Result<Vec<f64>> {
    if dist.support.is_empty() {
        return Err(Error::contract("sparsemax backward with empty support"));
    }
    if upstream.len() != dist.p.len() {
        return Err(Error::Shape {
            op: "sparsemax_backward",
            left: vec![dist.p.len()],
            right: vec![upstream.len()],
        });
    }
    let mean = dist.support.iter().map(|&i| upstream[i]).sum::<f64>() / dist.support.len() as f64;
    let mut grad = vec![0.0; upstream.len()];
    for &i in &dist.support {
        grad[i] = (upstream[i] - mean) * dist.scale;
    }
    Ok(grad)
}

/// Row kernel used by attention: sparsegen-lin of `scores + mask` into `out`.
pub(crate) fn sparsegen_row_into(
    scores: &[f64],
    mask: &[f64],
    scale: f64,
    buf: &mut Vec<f64>,
    shifted: &mut Vec<f64>,
    out: &mut [f64],
) -> Option<()> {
    shifted.clear();
    shifted.extend(scores.iter().zip(mask).map(|(&s, &m)| {
        if is_masked(m) {
            m
        } else {
            (s + m) * scale
        }
    }));
    let tau = threshold(shifted, buf)?;
    let mut support = 0;
    for (o, &z) in out.iter_mut().zip(shifted.iter()) {
        *o = if is_masked(z) { 0.0 } else { (z - tau).max(0.0) };
        support += usize::from(*o > 0.0);
    }
    if support == 1 {
        // `z − (z − 1)` can round below 1.
        out.iter_mut().filter(|o| **o > 0.0).for_each(|o| *o = 1.0);
    }
    Some(())
}

/// In-place backward for one row: `grad` holds upstream on entry.
pub(crate) fn sparsegen_row_backward(p: &[f64], upstream: &[f64], scale: f64, out: &mut [f64]) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&pv, &g) in p.iter().zip(upstream) {
        if pv > 0.0 {
            sum += g;
            count += 1;
        }
    }
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    for ((o, &pv), &g) in out.iter_mut().zip(p).zip(upstream) {
        if pv > 0.0 {
            *o += (g - mean) * scale;
        }
    }
}

/// Test oracle: minimise `‖p − a‖² − λ‖p‖²` over the simplex by enumerating
/// every candidate support and solving its stationarity condition.
pub fn brute_force_simplex_projection(a: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let n = a.len();
    if n == 0 || n > 8 {
        return Err(Error::contract(format!(
            "brute-force projection supports 1..=8 entries, got {n}"
        )));
    }
    check_lambda(lambda)?;
    let objective = |p: &[f64]| -> f64 {
        p.iter()
            .zip(a)
            .map(|(&pi, &ai)| (pi - ai).powi(2) - lambda * pi * pi)
            .sum()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for subset in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| subset & (1 << i) != 0).collect();
        let k = members.len() as f64;
        let sum_a: f64 = members.iter().map(|&i| a[i]).sum();
        // p_i = (a_i − c) / (1 − λ) on the support, with c fixed by Σp = 1.
        let c = (sum_a - (1.0 - lambda)) / k;
        let mut p = vec![0.0; n];
        let mut feasible = true;
        for &i in &members {
            p[i] = (a[i] - c) / (1.0 - lambda);
            if p[i] < -1e-12 {
                feasible = false;
            }
        }
        if !feasible {
            continue;
        }
        let value = objective(&p);
        if best.as_ref().map_or(true, |(v, _)| value < *v) {
            best = Some((value, p));
        }
    }
    Ok(best.expect("singleton supports are always feasible").1)
}
