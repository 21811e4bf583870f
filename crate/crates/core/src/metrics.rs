//! Imputation error metrics and ranking metrics for downstream classification.
//!
//! PR-AUC is average precision (step-wise over recall), not the trapezoidal
//! area; the two differ on small samples.

use crate::error::{Error, Result};

fn masked_errors<'a>(
    pred: &'a [f64],
    truth: &'a [f64],
    mask: &'a [bool],
) -> Result<impl Iterator<Item = f64> + 'a> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::contract(format!(
            "metric inputs differ in length: {} / {} / {}",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::contract("metric mask selects no entries"));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((p, t), _)| p - t))
}

pub fn rmse(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for e in masked_errors(pred, truth, mask)? {
        sum += e * e;
        n += 1;
    }
    Ok((sum / n as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for e in masked_errors(pred, truth, mask)? {
        sum += e.abs();
        n += 1;
    }
    Ok(sum / n as f64)
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::contract("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("ranking scores".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::contract("ranking metrics need both classes present"));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve from the Mann–Whitney U statistic, with ties
/// given their average rank.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group i..=j shares the mean rank.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: `Σ (R_k − R_{k−1}) · P_k` over distinct score
/// thresholds taken from highest to lowest.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| labels[k]).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
    fn all_pairs_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut hits, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    hits += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        hits / pairs
    }

    #[test]
    fn worked_error_example() {
        let mask = [true, true];
        assert!((rmse(&[1.0, 2.0], &[1.0, 4.0], &mask).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 4.0], &mask).unwrap(), 1.0);
        assert_eq!(rmse(&[3.0, 3.0], &[3.0, 3.0], &mask).unwrap(), 0.0);
    }

    #[test]
    fn mask_selects_entries() {
        let r = rmse(&[0.0, 100.0, 3.0], &[0.0, 0.0, 0.0], &[true, false, true]).unwrap();
        assert!((r - (4.5f64).sqrt()).abs() < 1e-15);
        assert!(rmse(&[1.0], &[1.0], &[false]).is_err());
    }

    #[test]
    fn auc_examples() {
        let labels = [false, false, true, true];
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 0.0);
        assert_eq!(auc_roc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert_eq!(pr_auc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert_eq!(pr_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert!(auc_roc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn average_precision_hand_example() {
        // Ranked: +, -, +  → AP = ½·1 + ½·⅔.
        let ap = pr_auc(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn auc_matches_all_pairs_oracle() {
        let mut rng = crate::rng::rng_for(9, &[]);
        let mut checked = 0;
        while checked < 500 {
            let n = rng.gen_range(2..=200);
            // Coarse scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..20) as f64 / 4.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let Ok(auc) = auc_roc(&scores, &labels) else { continue };
            assert!((auc - all_pairs_auc(&scores, &labels)).abs() < 1e-9);
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let mask = vec![true; p.len()];
            prop_assert!(rmse(&p, &t, &mask).unwrap() >= mae(&p, &t, &mask).unwrap() - 1e-12);
        }

        #[test]
        fn metrics_are_permutation_invariant(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let mask = vec![true; p.len()];
            let (pr, tr): (Vec<f64>, Vec<f64>) = pairs.iter().rev().copied().unzip();
            prop_assert!((rmse(&p, &t, &mask).unwrap() - rmse(&pr, &tr, &mask).unwrap()).abs() < 1e-12);
            prop_assert!((mae(&p, &t, &mask).unwrap() - mae(&pr, &tr, &mask).unwrap()).abs() < 1e-12);
        }
    }
}
