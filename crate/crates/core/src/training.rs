//! Optimisation loop: Adam, semi-supervised batch composition, early
//! stopping on held-out MIM loss, and the finite-difference gradient check.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::attention::AttentionKind;
use crate::data::{generate_synthetic, Series, SyntheticSpec, SyntheticTask};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig, NamedParam, StImputeModel, Task};
use crate::objectives::{combined_on_tape, loss_combined, sample_mim_mask, LossBreakdown, TimeSeriesBatch};
use crate::rng::{derive_seed, rng_for};
use crate::tape::Tape;
use crate::tensor::finite_difference_gradient;

const TAG_SHUFFLE: u64 = 0x5F;
const TAG_LABELS: u64 = 0x1AB;
const TAG_MIM: u64 = 0x313;
const TAG_DROPOUT: u64 = 0xD20;
const TAG_VALIDATION: u64 = 0x7A1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mim_rate: f64,
    pub seed: u64,
    /// Fraction of training series whose labels are exposed.
    pub labeled_fraction: f64,
    /// Global gradient-norm cap; off by default.
    pub clip_norm: Option<f64>,
    /// Share of the training series held out for early stopping; 0 disables it.
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 100,
            batch_size: 32,
            mim_rate: 0.5,
            seed: 0,
            labeled_fraction: 1.0,
            clip_norm: None,
            validation_fraction: 0.2,
            patience: Some(10),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mim_rate) {
            return bad(format!("mim_rate must be in [0, 1), got {}", self.mim_rate));
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return bad(format!("labeled_fraction must be in [0, 1], got {}", self.labeled_fraction));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must be in [0, 1), got {}", self.validation_fraction));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[NamedParam]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads[i]` is `None` for parameters that
/// received no gradient; they are left untouched. Any non-finite gradient
/// aborts the step before a parameter changes.
pub fn adam_step(
    params: &mut [NamedParam],
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract("gradient and moment lists must match the parameter list"));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.len() != p.tensor.len() {
                return Err(Error::contract(format!("gradient for `{}` has the wrong length", p.name)));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter `{}`", p.name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Mean training losses of one epoch; a component is `None` when no batch had it.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mim: Option<f64>,
    pub nrl: Option<f64>,
    pub downstream: Option<f64>,
    pub total: f64,
    pub validation_mim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Default)]
struct Running {
    sum: f64,
    n: usize,
}

impl Running {
    fn push(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Group indices by series length (keeping their order) and cut into batches.
fn batches(series: &[Series], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in order {
        by_len.entry(series[i].len()).or_default().push(i);
    }
    by_len
        .values()
        .flat_map(|idx| idx.chunks(batch_size).map(<[usize]>::to_vec))
        .collect()
}

fn gather(series: &[Series], idx: &[usize], labeled: &[bool]) -> Result<TimeSeriesBatch> {
    let members: Vec<&Series> = idx.iter().map(|&i| &series[i]).collect();
    let mut batch = TimeSeriesBatch::from_series(&members)?;
    for (slot, &i) in batch.labels.iter_mut().zip(idx) {
        if !labeled[i] {
            *slot = None;
        }
    }
    Ok(batch)
}

fn at(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

fn clip(grads: &mut [Option<Vec<f64>>], max_norm: f64) {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
}

/// Mean MIM loss over `series` with masks fixed by `seed`, in eval mode.
fn validation_mim(model: &StImputeModel, series: &[Series], config: &TrainConfig) -> Result<Option<f64>> {
    let order: Vec<usize> = (0..series.len()).collect();
    let none = vec![false; series.len()];
    let mut acc = Running::default();
    for (b, idx) in batches(series, &order, config.batch_size).iter().enumerate() {
        let batch = gather(series, idx, &none)?;
        let batch = sample_mim_mask(&batch, config.mim_rate, derive_seed(config.seed, &[TAG_VALIDATION, b as u64]))?;
        if batch.mim_mask.sum() == 0.0 {
            continue;
        }
        acc.push(loss_combined(&batch, model, Mode::Eval)?.mim);
    }
    Ok(acc.mean())
}

/// Train `model` in place on `series`.
///
/// Each epoch reshuffles, re-draws the MIM masks and takes one Adam step per
/// batch. Labels are exposed for a fixed, seeded `labeled_fraction` of the
/// series. When a validation share is configured, the parameters with the
/// lowest validation MIM loss are restored at the end.
pub fn train(model: &mut StImputeModel, series: &[Series], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if series.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut idx: Vec<usize> = (0..series.len()).collect();
    idx.shuffle(&mut rng_for(config.seed, &[TAG_VALIDATION]));
    let n_val = (series.len() as f64 * config.validation_fraction).round() as usize;
    let n_val = if series.len() - n_val == 0 { 0 } else { n_val };
    let (val_idx, train_idx) = idx.split_at(n_val);
    let pick = |ids: &[usize]| -> Vec<Series> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.iter().map(|&i| series[i].clone()).collect()
    };
    let (train_set, val_set) = (pick(train_idx), pick(val_idx));

    let mut labeled = vec![false; train_set.len()];
    if model.config().task.output_width().is_some() {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng_for(config.seed, &[TAG_LABELS]));
        let k = (train_set.len() as f64 * config.labeled_fraction).round() as usize;
        order[..k].iter().for_each(|&i| labeled[i] = true);
    }

    let mut state = AdamState::new(model.params());
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Vec<NamedParam>)> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = rng_for(config.seed, &[TAG_SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        let mut plan = batches(&train_set, &order, config.batch_size);
        plan.shuffle(&mut rng);

        let (mut mim, mut nrl, mut down, mut total) =
            (Running::default(), Running::default(), Running::default(), Running::default());
        for (b, members) in plan.iter().enumerate() {
            let coords = [epoch as u64, b as u64];
            let batch = gather(&train_set, members, &labeled)?;
            let batch = sample_mim_mask(&batch, config.mim_rate, derive_seed(config.seed, &[TAG_MIM, coords[0], coords[1]]))?;
            let mode = Mode::Train {
                dropout_seed: derive_seed(config.seed, &[TAG_DROPOUT, coords[0], coords[1]]),
            };
            let mut tape = Tape::new();
            let (fwd, vars) = combined_on_tape(&mut tape, &batch, model, mode).map_err(|e| at(epoch, b, e))?;
            let losses = LossBreakdown::read(&tape, &vars);
            if !losses.total.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}, batch {b}: loss is {}", losses.total)));
            }
            tape.backward(vars.total).map_err(|e| at(epoch, b, e))?;
            let mut grads: Vec<Option<Vec<f64>>> = fwd.params.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();
            if let Some(c) = config.clip_norm {
                clip(&mut grads, c);
            }
            adam_step(model.params_mut(), &grads, &mut state, config).map_err(|e| at(epoch, b, e))?;
            mim.push(losses.mim);
            nrl.push(losses.nrl);
            down.push(losses.downstream);
            total.push(Some(losses.total));
        }

        let validation = if val_set.is_empty() {
            None
        } else {
            validation_mim(model, &val_set, config).map_err(|e| at(epoch, 0, e))?
        };
        let record = EpochRecord {
            epoch,
            mim: mim.mean(),
            nrl: nrl.mean(),
            downstream: down.mean(),
            total: total.mean().unwrap_or(0.0),
            validation_mim: validation,
        };
        debug!("epoch {epoch}: {record:?}");
        trace.push(record);

        if let Some(v) = validation {
            if best.as_ref().map_or(true, |(b, _, _)| v < *b) {
                best = Some((v, epoch, model.params().to_vec()));
                stale = 0;
            } else {
                stale += 1;
                if config.patience.is_some_and(|p| stale >= p) {
                    info!("early stop at epoch {epoch}; best validation MIM at epoch {}", best.as_ref().map_or(0, |b| b.1));
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            for (slot, p) in model.params_mut().iter_mut().zip(params) {
                slot.tensor = p.tensor;
            }
            epoch
        }
        None => trace.len(),
    };
    model.zero_grad();
    Ok(TrainOutcome {
        trace,
        best_epoch,
        stopped_early,
    })
}

/// Write the loss trace as CSV: `epoch,L_MIM,L_NRL,L_c,total`, empty cells
/// for absent components.
pub fn write_trace<W: std::io::Write>(writer: W, trace: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let map = |e: csv::Error| Error::Data(format!("writing loss trace: {e}"));
    w.write_record(["epoch", "L_MIM", "L_NRL", "L_c", "total"]).map_err(map)?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in trace {
        w.write_record([r.epoch.to_string(), cell(r.mim), cell(r.nrl), cell(r.downstream), r.total.to_string()])
            .map_err(map)?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing loss trace: {e}")))
}

pub fn save_trace(path: &Path, trace: &[EpochRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(file, trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tolerance
    }
}

pub const GRADCHECK_STEP: f64 = 1e-6;

/// Move every all-zero parameter tensor to `offset`.
///
/// A timestep whose channels are all hidden embeds to exactly the embedding
/// bias, so with zero-initialised biases the ReLU sits on its kink and a
/// central difference reads half a slope there. Checking away from the kink
/// keeps the comparison meaningful.
pub fn offset_zero_params(model: &mut StImputeModel, offset: f64) {
    for p in model.params_mut() {
        if p.tensor.data().iter().all(|&v| v == 0.0) {
            p.tensor.data_mut().fill(offset);
        }
    }
}

/// Tiny model and batch used by the gradient check: two series of length
/// eight, two channels, one 16-wide layer with two heads.
pub fn gradcheck_fixture(kind: AttentionKind) -> Result<(StImputeModel, TimeSeriesBatch)> {
    let data = generate_synthetic(&SyntheticSpec {
        n_series: 2,
        length: 8,
        n_features: 2,
        seed: 3,
        task: SyntheticTask::Classification,
    })?;
    let mut model = StImputeModel::new(ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        attention_kind: kind,
        n_features: 2,
        task: Task::Classification { n_classes: 2 },
        init_seed: 11,
        ..ModelConfig::default()
    })?;
    offset_zero_params(&mut model, 0.05);
    let members: Vec<_> = data.series.iter().collect();
    let batch = sample_mim_mask(&TimeSeriesBatch::from_series(&members)?, 0.5, 5)?;
    Ok((model, batch))
}

/// Compare tape gradients of the combined loss against central finite
/// differences for every trainable parameter tensor. The error of a tensor
/// is `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞, 1e-10)`.
/// Dropout is active with a fixed seed so both sides see the same masks.
pub fn gradient_check(model: &StImputeModel, batch: &TimeSeriesBatch, tolerance: f64) -> Result<GradCheckReport> {
    let mode = Mode::Train { dropout_seed: 0x6C };
    let mut tape = Tape::new();
    let (fwd, vars) = combined_on_tape(&mut tape, batch, model, mode)?;
    tape.backward(vars.total)?;

    let mut probe = model.clone();
    let mut entries = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        if !p.tensor.requires_grad {
            continue;
        }
        let analytic = tape.grad(fwd.params[i]).map_or_else(|| vec![0.0; p.tensor.len()], <[f64]>::to_vec);
        let numeric = finite_difference_gradient(
            |x| {
                probe.params_mut()[i].tensor.data_mut().copy_from_slice(x.data());
                Ok(loss_combined(batch, &probe, mode)?.total)
            },
            &p.tensor,
            GRADCHECK_STEP,
        )?;
        probe.params_mut()[i].tensor.data_mut().copy_from_slice(p.tensor.data());
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let diff: Vec<f64> = analytic.iter().zip(numeric.data()).map(|(a, b)| a - b).collect();
        let denom = inf(&analytic).max(inf(numeric.data())).max(1e-10);
        entries.push(GradCheckEntry {
            name: p.name.clone(),
            max_relative_error: inf(&diff) / denom,
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(values: &[f64]) -> NamedParam {
        NamedParam {
            name: "w".into(),
            tensor: Tensor::from_vec(values.to_vec()).with_requires_grad(true),
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![param(&[1.0, -2.0])];
        let mut state = AdamState::new(&params);
        let cfg = TrainConfig::default();
        for _ in 0..5 {
            adam_step(&mut params, &[Some(vec![0.0, 0.0])], &mut state, &cfg).unwrap();
        }
        assert_eq!(params[0].tensor.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = TrainConfig::default();
        let g = [0.5, -3.0, 1e-3];
        let mut params = vec![param(&[0.0; 3])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[Some(g.to_vec())], &mut state, &cfg).unwrap();
        for (w, g) in params[0].tensor.data().iter().zip(g) {
            // m̂ = g, v̂ = g², so Δ = −lr·g/(|g|+ε).
            let expect = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!((w - expect).abs() < 1e-18, "{w} vs {expect}");
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_learning_rate() {
        let cfg = TrainConfig::default();
        let mut params = vec![param(&[0.0])];
        let mut state = AdamState::new(&params);
        let mut prev = 0.0;
        let mut step = 0.0;
        for _ in 0..5000 {
            adam_step(&mut params, &[Some(vec![2.5])], &mut state, &cfg).unwrap();
            step = prev - params[0].tensor.data()[0];
            prev = params[0].tensor.data()[0];
        }
        assert!((step - cfg.learning_rate).abs() < 1e-9 * cfg.learning_rate.max(1.0), "{step}");
    }

    #[test]
    fn non_finite_gradient_aborts_before_update() {
        let cfg = TrainConfig::default();
        let mut params = vec![param(&[1.0]), param(&[2.0])];
        params[1].name = "layer0.w_q".into();
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &[Some(vec![1.0]), Some(vec![f64::NAN])], &mut state, &cfg).unwrap_err();
        assert!(err.to_string().contains("layer0.w_q"));
        assert_eq!(params[0].tensor.data(), &[1.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn missing_gradient_skips_parameter() {
        let cfg = TrainConfig::default();
        let mut params = vec![param(&[1.0]), param(&[2.0])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[None, Some(vec![1.0])], &mut state, &cfg).unwrap();
        assert_eq!(params[0].tensor.data(), &[1.0]);
        assert!(params[1].tensor.data()[0] < 2.0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Some(vec![3.0]), None, Some(vec![4.0])];
        clip(&mut g, 1.0);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { labeled_fraction: 1.5, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { clip_norm: Some(-1.0), ..Default::default() },
        ];
        assert!(bad.iter().all(|c| c.validate().is_err()));
    }

    #[test]
    fn trace_csv_layout() {
        let trace = vec![EpochRecord {
            epoch: 1,
            mim: Some(0.5),
            nrl: Some(0.25),
            downstream: None,
            total: 0.75,
            validation_mim: None,
        }];
        let mut out = Vec::new();
        write_trace(&mut out, &trace).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "epoch,L_MIM,L_NRL,L_c,total\n1,0.5,0.25,,0.75\n");
    }
}
