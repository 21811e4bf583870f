//! Training objectives.
//!
//! - masked imputation loss: MAE over the artificially masked entries `M`;
//! - reconstruction loss: MAE over the observed, unmasked entries `O`;
//! - downstream loss: cross-entropy (classification) or absolute error
//!   (regression), averaged over the labeled series of the batch.
//!
//! The combined objective is their unweighted sum; absent terms contribute 0.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Label, Series};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelInput, StImputeModel, TapeForward, Task};
use crate::rng::rng_for;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A batch of equal-length series with its three partitioning masks.
///
/// Every entry is exactly one of: naturally missing, MIM-masked (`mim_mask`),
/// or observed and visible (`observed_mask`).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub n_features: usize,
    /// `[batch × seq_len × n_features]` ground truth (0 where naturally missing).
    pub values: Tensor,
    pub natural_missing: Tensor,
    pub mim_mask: Tensor,
    pub observed_mask: Tensor,
    pub labels: Vec<Option<Label>>,
}

impl TimeSeriesBatch {
    /// Stack series with an empty MIM mask.
    pub fn from_series(series: &[&Series]) -> Result<Self> {
        let first = series
            .first()
            .ok_or_else(|| Error::contract("empty batch"))?;
        let (n, f) = (first.len(), first.n_features());
        let mut values = Vec::with_capacity(series.len() * n * f);
        let mut natural = Vec::with_capacity(values.capacity());
        for s in series {
            if s.len() != n || s.n_features() != f {
                return Err(Error::Data(format!(
                    "series `{}` is {}×{}, batch expects {n}×{f}",
                    s.id,
                    s.len(),
                    s.n_features()
                )));
            }
            for (&v, &m) in s.values.iter().zip(&s.missing) {
                values.push(if m { 0.0 } else { v });
                natural.push(if m { 1.0 } else { 0.0 });
            }
        }
        let shape = vec![series.len(), n, f];
        let observed: Vec<f64> = natural.iter().map(|m| 1.0 - m).collect();
        Ok(TimeSeriesBatch {
            batch: series.len(),
            seq_len: n,
            n_features: f,
            values: Tensor::new(shape.clone(), values)?,
            natural_missing: Tensor::new(shape.clone(), natural)?,
            mim_mask: Tensor::zeros(&shape),
            observed_mask: Tensor::new(shape, observed)?,
            labels: series.iter().map(|s| s.label).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (nm, mm, om) = (
            self.natural_missing.data(),
            self.mim_mask.data(),
            self.observed_mask.data(),
        );
        for i in 0..nm.len() {
            let binary = [nm[i], mm[i], om[i]].iter().all(|v| *v == 0.0 || *v == 1.0);
            if !binary || nm[i] + mm[i] + om[i] != 1.0 {
                return Err(Error::contract(format!(
                    "batch masks do not partition entry {i}: natural {} mim {} observed {}",
                    nm[i], mm[i], om[i]
                )));
            }
        }
        if self.labels.len() != self.batch {
            return Err(Error::contract("one label slot per series required"));
        }
        Ok(())
    }

    /// Model input: values visible only where `observed_mask` is set.
    pub fn model_input(&self) -> Result<ModelInput> {
        let rows = self.batch * self.seq_len;
        let values = self
            .values
            .data()
            .iter()
            .zip(self.observed_mask.data())
            .map(|(v, o)| v * o)
            .collect();
        Ok(ModelInput {
            batch: self.batch,
            seq_len: self.seq_len,
            values: Tensor::new(vec![rows, self.n_features], values)?,
            available: self.observed_mask.clone().reshape(vec![rows, self.n_features])?,
        })
    }

    pub fn with_labels_hidden(mut self) -> Self {
        self.labels.iter_mut().for_each(|l| *l = None);
        self
    }
}

/// Mask each originally observed entry independently with probability
/// `rate`, keeping at least one visible entry per series.
pub fn sample_mim_mask(batch: &TimeSeriesBatch, rate: f64, seed: u64) -> Result<TimeSeriesBatch> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("MIM rate must be in [0, 1), got {rate}")));
    }
    let mut out = batch.clone();
    let per = batch.seq_len * batch.n_features;
    let natural = batch.natural_missing.data();
    let mut mim = vec![0.0; natural.len()];
    for b in 0..batch.batch {
        let mut rng = rng_for(seed, &[0x313, b as u64]);
        let range = b * per..(b + 1) * per;
        let observed: Vec<usize> = range.clone().filter(|&i| natural[i] == 0.0).collect();
        for &i in &observed {
            if rng.gen::<f64>() < rate {
                mim[i] = 1.0;
            }
        }
        if !observed.is_empty() && observed.iter().all(|&i| mim[i] == 1.0) {
            let keep = *observed.choose(&mut rng).expect("non-empty");
            warn!("MIM masking would hide every observed value of series {b}; keeping one");
            mim[keep] = 0.0;
        }
    }
    let observed: Vec<f64> = natural.iter().zip(&mim).map(|(n, m)| 1.0 - n - m).collect();
    let shape = batch.values.shape().to_vec();
    out.mim_mask = Tensor::new(shape.clone(), mim)?;
    out.observed_mask = Tensor::new(shape, observed)?;
    Ok(out)
}

fn masked_mae(t: &Tensor, t_hat: &Tensor, mask: &Tensor, name: &str) -> Result<f64> {
    if t.len() != t_hat.len() || t.len() != mask.len() {
        return Err(Error::Shape {
            op: "masked_mae",
            left: t.shape().to_vec(),
            right: t_hat.shape().to_vec(),
        });
    }
    let count: f64 = mask.data().iter().sum();
    if count <= 0.0 {
        return Err(Error::contract(format!("{name} loss over an empty mask")));
    }
    let total: f64 = t
        .data()
        .iter()
        .zip(t_hat.data())
        .zip(mask.data())
        .map(|((a, b), m)| m * (a - b).abs())
        .sum();
    Ok(total / count)
}

/// Mean absolute error over MIM-masked entries.
pub fn loss_mim(t: &Tensor, t_hat: &Tensor, mim_mask: &Tensor) -> Result<f64> {
    masked_mae(t, t_hat, mim_mask, "MIM")
}

/// Mean absolute error over observed, unmasked entries.
pub fn loss_nrl(t: &Tensor, t_hat: &Tensor, observed_mask: &Tensor) -> Result<f64> {
    masked_mae(t, t_hat, observed_mask, "NRL")
}

fn check_task_labels(labels: &[Option<Label>], task: Task) -> Result<()> {
    if task == Task::None && labels.iter().any(Option::is_some) {
        return Err(Error::Config("labels supplied but the model has no downstream task".into()));
    }
    Ok(())
}

/// Downstream loss averaged over labeled rows of `task_output` (`[batch × width]`).
/// Returns `None` when no row is labeled.
pub fn loss_downstream(task_output: &Tensor, labels: &[Option<Label>], task: Task) -> Result<Option<f64>> {
    check_task_labels(labels, task)?;
    if labels.iter().all(Option::is_none) {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let out = tape.constant(task_output.clone());
    let v = downstream_on_tape(&mut tape, out, labels, task)?;
    Ok(v.map(|v| tape.value(v).data()[0]))
}

fn downstream_on_tape(tape: &mut Tape, out: Var, labels: &[Option<Label>], task: Task) -> Result<Option<Var>> {
    check_task_labels(labels, task)?;
    if labels.iter().all(Option::is_none) {
        return Ok(None);
    }
    match task {
        Task::None => Ok(None),
        Task::Classification { .. } => {
            let targets: Vec<Option<usize>> = labels
                .iter()
                .map(|l| match l {
                    Some(Label::Class(c)) => Ok(Some(*c)),
                    Some(Label::Value(v)) => Err(Error::Data(format!("real label {v} for a classification task"))),
                    None => Ok(None),
                })
                .collect::<Result<_>>()?;
            Ok(Some(tape.cross_entropy(out, &targets)?))
        }
        Task::Regression => {
            let target = Tensor::new(vec![labels.len(), 1], labels.iter().map(|l| l.map_or(0.0, Label::value)).collect())?;
            let mask = Tensor::new(
                vec![labels.len(), 1],
                labels.iter().map(|l| if l.is_some() { 1.0 } else { 0.0 }).collect(),
            )?;
            Ok(Some(tape.masked_abs_mean(out, &target, &mask)?))
        }
    }
}

/// Loss nodes on a tape; terms are `None` when their mask or labels are empty.
pub struct LossVars {
    pub mim: Option<Var>,
    pub nrl: Option<Var>,
    pub downstream: Option<Var>,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub mim: Option<f64>,
    pub nrl: Option<f64>,
    pub downstream: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read(tape: &Tape, vars: &LossVars) -> Self {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).data()[0]);
        LossBreakdown {
            mim: get(vars.mim),
            nrl: get(vars.nrl),
            downstream: get(vars.downstream),
            total: tape.value(vars.total).data()[0],
        }
    }
}

/// Record the forward pass and the combined loss on `tape`.
pub fn combined_on_tape(
    tape: &mut Tape,
    batch: &TimeSeriesBatch,
    model: &StImputeModel,
    mode: Mode,
) -> Result<(TapeForward, LossVars)> {
    batch.validate()?;
    let input = batch.model_input()?;
    let fwd = model.forward_on_tape(tape, &input, mode)?;
    let has = |m: &Tensor| m.data().iter().any(|v| *v > 0.0);
    let mim = if has(&batch.mim_mask) {
        Some(tape.masked_abs_mean(fwd.reconstruction, &batch.values, &batch.mim_mask)?)
    } else {
        None
    };
    let nrl = if has(&batch.observed_mask) {
        Some(tape.masked_abs_mean(fwd.reconstruction, &batch.values, &batch.observed_mask)?)
    } else {
        None
    };
    let downstream = match fwd.task_output {
        Some(out) => downstream_on_tape(tape, out, &batch.labels, model.config().task)?,
        None => {
            check_task_labels(&batch.labels, model.config().task)?;
            None
        }
    };
    let mut total: Option<Var> = None;
    for term in [mim, nrl, downstream].into_iter().flatten() {
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => return Err(Error::contract("batch has no entries to score")),
    };
    Ok((
        fwd,
        LossVars {
            mim,
            nrl,
            downstream,
            total,
        },
    ))
}

/// Combined loss `L_MIM + L_NRL + L_c` for one batch.
pub fn loss_combined(batch: &TimeSeriesBatch, model: &StImputeModel, mode: Mode) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let (_, vars) = combined_on_tape(&mut tape, batch, model, mode)?;
    Ok(LossBreakdown::read(&tape, &vars))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn mim_loss_examples() {
        let truth = t(&[1.0, 2.0, 3.0]);
        let m = t(&[0.0, 1.0, 0.0]);
        assert_eq!(loss_mim(&truth, &truth, &m).unwrap(), 0.0);
        assert_eq!(loss_mim(&truth, &t(&[1.0, 5.0, 3.0]), &m).unwrap(), 3.0);
        let all = t(&[1.0, 1.0, 1.0]);
        let pred = t(&[1.5, 1.0, 2.0]);
        let doubled = t(&[2.0, 0.0, 1.0]);
        assert_eq!(
            loss_mim(&truth, &doubled, &all).unwrap(),
            2.0 * loss_mim(&truth, &pred, &all).unwrap()
        );
        assert!(loss_mim(&truth, &truth, &t(&[0.0; 3])).is_err());
    }

    #[test]
    fn nrl_loss_examples() {
        let truth = t(&[1.0, 2.0, 3.0]);
        let o = t(&[0.0, 1.0, 0.0]);
        assert_eq!(loss_nrl(&truth, &truth, &o).unwrap(), 0.0);
        assert_eq!(loss_nrl(&truth, &t(&[1.0, 5.0, 3.0]), &o).unwrap(), 3.0);
        assert!(loss_nrl(&truth, &truth, &t(&[0.0; 3])).is_err());
    }

    #[test]
    fn downstream_loss_examples() {
        let uniform = Tensor::from_rows(&[vec![0.3, 0.3, 0.3]]);
        let ce = loss_downstream(&uniform, &[Some(Label::Class(1))], Task::Classification { n_classes: 3 })
            .unwrap()
            .unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-14);

        let confident = Tensor::from_rows(&[vec![40.0, -40.0]]);
        let ce = loss_downstream(&confident, &[Some(Label::Class(0))], Task::Classification { n_classes: 2 })
            .unwrap()
            .unwrap();
        assert!(ce < 1e-30);

        let reg = Tensor::from_rows(&[vec![2.0]]);
        let mae = loss_downstream(&reg, &[Some(Label::Value(3.5))], Task::Regression).unwrap().unwrap();
        assert_eq!(mae, 1.5);

        assert!(loss_downstream(&reg, &[Some(Label::Value(1.0))], Task::None).is_err());
        assert_eq!(loss_downstream(&reg, &[None], Task::Regression).unwrap(), None);
    }

    fn batch_of(n_series: usize, len: usize, missing_every: usize) -> TimeSeriesBatch {
        let series: Vec<Series> = (0..n_series)
            .map(|s| {
                let values = (0..len).map(|i| (i + s) as f64 * 0.1).collect();
                let missing = (0..len).map(|i| missing_every > 0 && i % missing_every == 0).collect();
                Series::new(format!("s{s}"), len, 1, values, missing, None).unwrap()
            })
            .collect();
        let refs: Vec<&Series> = series.iter().collect();
        TimeSeriesBatch::from_series(&refs).unwrap()
    }

    #[test]
    fn zero_rate_masks_nothing() {
        let b = batch_of(2, 10, 3);
        let m = sample_mim_mask(&b, 0.0, 1).unwrap();
        assert!(m.mim_mask.data().iter().all(|v| *v == 0.0));
        let expect: Vec<f64> = b.natural_missing.data().iter().map(|v| 1.0 - v).collect();
        assert_eq!(m.observed_mask.data(), expect.as_slice());
        m.validate().unwrap();
    }

    #[test]
    fn half_rate_concentrates() {
        let b = batch_of(1, 1000, 0);
        let m = sample_mim_mask(&b, 0.5, 42).unwrap();
        let count: f64 = m.mim_mask.data().iter().sum();
        assert!((450.0..=550.0).contains(&count), "{count}");
        assert_eq!(sample_mim_mask(&b, 0.5, 42).unwrap(), m);
        assert_ne!(sample_mim_mask(&b, 0.5, 43).unwrap().mim_mask, m.mim_mask);
    }

    #[test]
    fn masks_partition_and_skip_natural_missing() {
        let b = batch_of(3, 20, 4);
        let m = sample_mim_mask(&b, 0.6, 7).unwrap();
        m.validate().unwrap();
        for i in 0..m.values.len() {
            assert!(!(m.mim_mask.data()[i] == 1.0 && m.natural_missing.data()[i] == 1.0));
        }
        assert!(sample_mim_mask(&b, 1.0, 7).is_err());
    }

    #[test]
    fn at_least_one_entry_stays_visible() {
        let b = batch_of(50, 2, 0);
        let m = sample_mim_mask(&b, 0.99, 3).unwrap();
        for s in 0..50 {
            let visible: f64 = m.observed_mask.data()[s * 2..s * 2 + 2].iter().sum();
            assert!(visible >= 1.0);
        }
    }
}
