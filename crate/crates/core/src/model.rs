//! The imputation network.
//!
//! `[values ; availability]` is projected to `d_model` with a ReLU, the
//! sinusoidal position table is added, and the result runs through a stack
//! of diagonal-masked attention layers. A final layer norm feeds two heads:
//! a per-timestep reconstruction head (`d_model → n_features`) and, when the
//! data has labels, a downstream head applied to the mean-pooled sequence.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    diagonal_mask, encoder_layer, encoder_layer_shapes, positional_encoding, AttentionKind,
    AttentionSettings, DiagonalMask, Dropout, EncoderLayer, LAYER_NORM_EPS,
};
use crate::data::{Normalization, Series};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::sparse::check_lambda;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Downstream task attached to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    None,
    Classification { n_classes: usize },
    Regression,
}

impl Task {
    pub fn output_width(self) -> Option<usize> {
        match self {
            Task::None => None,
            Task::Classification { n_classes } => Some(n_classes),
            Task::Regression => Some(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub dropout: f64,
    pub lambda: f64,
    pub attention_kind: AttentionKind,
    /// Ablation switch; the diagonal mask is on unless this is false.
    pub diagonal_mask: bool,
    pub n_features: usize,
    pub task: Task,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            dropout: 0.15,
            lambda: 0.5,
            attention_kind: AttentionKind::Sparse,
            diagonal_mask: true,
            n_features: 1,
            task: Task::None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for positional encoding".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        check_lambda(self.lambda).map_err(|e| Error::Config(e.to_string()))?;
        if self.n_layers == 0 || self.n_features == 0 {
            return Err(Error::Config("n_layers and n_features must be positive".into()));
        }
        if let Task::Classification { n_classes } = self.task {
            if n_classes < 2 {
                return Err(Error::Config("classification needs at least 2 classes".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Dropout active, masks drawn from the given seed.
    Train { dropout_seed: u64 },
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

/// Model input for `batch` stacked series of equal length.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub batch: usize,
    pub seq_len: usize,
    /// `[batch·seq_len × n_features]`, unavailable entries zero-filled.
    pub values: Tensor,
    /// `[batch·seq_len × n_features]`, 1 where the value is available.
    pub available: Tensor,
}

/// Handles produced by a forward pass recorded on a tape.
pub struct TapeForward {
    /// One var per model parameter, in [`StImputeModel::params`] order.
    pub params: Vec<Var>,
    /// `[batch·seq_len × n_features]`.
    pub reconstruction: Var,
    /// `[batch × width]` logits or regression output.
    pub task_output: Option<Var>,
    /// Attention weights of every layer.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StImputeModel {
    config: ModelConfig,
    params: Vec<NamedParam>,
    embed_w: usize,
    embed_b: usize,
    layers: Vec<EncoderLayer<usize>>,
    final_gamma: usize,
    final_beta: usize,
    recon_w: usize,
    recon_b: usize,
    head: Option<(usize, usize)>,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Zeros,
    Ones,
}

impl StImputeModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.init_seed, &[0x1417]);
        let mut params = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| -> usize {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Uniform => {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            let tensor = Tensor::new(shape, data)
                .expect("shape product matches data length")
                .with_requires_grad(true);
            params.push(NamedParam { name, tensor });
            params.len() - 1
        };
        let (d, f) = (config.d_model, config.n_features);
        let embed_w = add("embed.w".into(), vec![2 * f, d], Init::Uniform);
        let embed_b = add("embed.b".into(), vec![d], Init::Zeros);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let shapes = encoder_layer_shapes(d);
            let names = EncoderLayer {
                w_q: 0usize,
                w_k: 1,
                w_v: 2,
                w_o: 3,
                ln1_gamma: 4,
                ln1_beta: 5,
                ln2_gamma: 6,
                ln2_beta: 7,
                ffn_w1: 8,
                ffn_b1: 9,
                ffn_w2: 10,
                ffn_b2: 11,
            };
            let label = names.named();
            let layer = names.map(|slot| {
                let (name, _) = label[slot];
                let init = if name.ends_with("gamma") {
                    Init::Ones
                } else if name.ends_with("beta") || name.starts_with("ffn_b") {
                    Init::Zeros
                } else {
                    Init::Uniform
                };
                add(format!("layer{l}.{name}"), shapes[slot].clone(), init)
            });
            layers.push(layer);
        }
        let final_gamma = add("final_ln.gamma".into(), vec![d], Init::Ones);
        let final_beta = add("final_ln.beta".into(), vec![d], Init::Zeros);
        let recon_w = add("recon.w".into(), vec![d, f], Init::Uniform);
        let recon_b = add("recon.b".into(), vec![f], Init::Zeros);
        let head = config.task.output_width().map(|w| {
            (
                add("head.w".into(), vec![d, w], Init::Uniform),
                add("head.b".into(), vec![w], Init::Zeros),
            )
        });
        Ok(StImputeModel {
            config,
            params,
            embed_w,
            embed_b,
            layers,
            final_gamma,
            final_beta,
            recon_w,
            recon_b,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    fn attention_mask(&self, seq_len: usize) -> Result<Tensor> {
        if self.config.diagonal_mask {
            Ok(diagonal_mask(seq_len)?.matrix().clone())
        } else {
            Ok(DiagonalMask::disabled(seq_len))
        }
    }

    /// Record the embedding step: `ReLU([T;A] W_e + b_e) + PE`.
    fn embed_on_tape(&self, tape: &mut Tape, params: &[Var], input: &ModelInput) -> Result<Var> {
        let f = self.config.n_features;
        let rows = input.batch * input.seq_len;
        if input.values.dims2() != (rows, f) || input.available.dims2() != (rows, f) {
            return Err(Error::Shape {
                op: "embed_input",
                left: input.values.shape().to_vec(),
                right: input.available.shape().to_vec(),
            });
        }
        let mut joined = Vec::with_capacity(rows * 2 * f);
        for r in 0..rows {
            joined.extend_from_slice(input.values.row(r));
            joined.extend_from_slice(input.available.row(r));
        }
        let joined = tape.constant(Tensor::new(vec![rows, 2 * f], joined)?);
        let h = tape.matmul(joined, params[self.embed_w])?;
        let h = tape.add_bias(h, params[self.embed_b])?;
        let h = tape.relu(h)?;
        let pe = positional_encoding(input.seq_len, self.config.d_model)?;
        let pe = Tensor::new(vec![rows, self.config.d_model], pe.data().repeat(input.batch))?;
        tape.add_const(h, &pe)
    }

    fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect()
    }

    /// Record a full forward pass on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, input: &ModelInput, mode: Mode) -> Result<TapeForward> {
        let params = self.register(tape);
        let mut x = self.embed_on_tape(tape, &params, input)?;
        let mask = self.attention_mask(input.seq_len)?;
        let settings = AttentionSettings {
            heads: self.config.n_heads,
            seq_len: input.seq_len,
            normalizer: self.config.attention_kind.normalizer(self.config.lambda),
            mask: &mask,
        };
        let mut drng = match mode {
            Mode::Train { dropout_seed } => Some(rng_for(dropout_seed, &[0xD20])),
            Mode::Eval => None,
        };
        let mut dropout = drng.as_mut().map(|rng| Dropout {
            rate: self.config.dropout,
            rng,
        });
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let vars = layer.map(|i| params[i]);
            let out = encoder_layer(tape, x, &vars, &settings, dropout.as_mut())?;
            attention.push(out.weights);
            x = out.output;
        }
        let h = tape.layer_norm(x, params[self.final_gamma], params[self.final_beta], LAYER_NORM_EPS)?;
        let recon = tape.matmul(h, params[self.recon_w])?;
        let reconstruction = tape.add_bias(recon, params[self.recon_b])?;
        let task_output = match self.head {
            Some((w, b)) => {
                let pooled = tape.mean_pool(h, input.seq_len)?;
                let out = tape.matmul(pooled, params[w])?;
                Some(tape.add_bias(out, params[b])?)
            }
            None => None,
        };
        Ok(TapeForward {
            params,
            reconstruction,
            task_output,
            attention,
        })
    }

    /// Forward pass returning plain tensors: reconstruction
    /// `[batch × seq_len × n_features]` and the optional task output.
    pub fn forward(&self, input: &ModelInput, mode: Mode) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, input, mode)?;
        let recon = tape
            .value(out.reconstruction)
            .clone()
            .reshape(vec![input.batch, input.seq_len, self.config.n_features])?;
        let task = out.task_output.map(|v| tape.value(v).clone());
        Ok((strip(recon), task.map(strip)))
    }

    /// Attention weights of every layer, each `[batch·heads, seq_len, seq_len]`.
    pub fn attention_maps(&self, input: &ModelInput, mode: Mode) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, input, mode)?;
        Ok(out.attention.into_iter().map(|v| strip(tape.value(v).clone())).collect())
    }

    /// Embedding of a single series `[n×f]` given its missing mask (1 = missing).
    pub fn embed_input(&self, values: &Tensor, missing_mask: &Tensor) -> Result<Tensor> {
        if values.shape() != missing_mask.shape() {
            return Err(Error::Shape {
                op: "embed_input",
                left: values.shape().to_vec(),
                right: missing_mask.shape().to_vec(),
            });
        }
        let (n, _) = values.dims2();
        let available: Vec<f64> = missing_mask.data().iter().map(|m| 1.0 - m).collect();
        let filled: Vec<f64> = values
            .data()
            .iter()
            .zip(&available)
            .map(|(v, a)| if *a > 0.0 { *v } else { 0.0 })
            .collect();
        let input = ModelInput {
            batch: 1,
            seq_len: n,
            values: Tensor::new(values.shape().to_vec(), filled)?,
            available: Tensor::new(values.shape().to_vec(), available)?,
        };
        let mut tape = Tape::new();
        let params = self.register(&mut tape);
        let out = self.embed_on_tape(&mut tape, &params, &input)?;
        Ok(strip(tape.value(out).clone()))
    }

    /// Fill the missing entries of each series; observed entries are copied
    /// through untouched. Series are batched by length.
    pub fn impute(&self, series: &[Series]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 32;
        let mut out: Vec<Option<Vec<f64>>> = vec![None; series.len()];
        let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, s) in series.iter().enumerate() {
            if s.n_features() != self.config.n_features {
                return Err(Error::Data(format!(
                    "series `{}` has {} features, model expects {}",
                    s.id,
                    s.n_features(),
                    self.config.n_features
                )));
            }
            by_len.entry(s.len()).or_default().push(i);
        }
        for (len, idxs) in by_len {
            for chunk in idxs.chunks(CHUNK) {
                let members: Vec<&Series> = chunk.iter().map(|&i| &series[i]).collect();
                let input = input_from_series(&members, len)?;
                let (recon, _) = self.forward(&input, Mode::Eval)?;
                let per = len * self.config.n_features;
                for (k, &i) in chunk.iter().enumerate() {
                    let s = &series[i];
                    let pred = &recon.data()[k * per..(k + 1) * per];
                    let filled = s
                        .values
                        .iter()
                        .zip(&s.missing)
                        .zip(pred)
                        .map(|((&v, &m), &p)| if m { p } else { v })
                        .collect();
                    out[i] = Some(filled);
                }
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every series assigned")).collect())
    }

    /// Task-head output per series (`[width]` each), computed from the
    /// series' available values.
    pub fn predict_task(&self, series: &[Series]) -> Result<Vec<Vec<f64>>> {
        if self.head.is_none() {
            return Err(Error::Config("model has no downstream head".into()));
        }
        let mut out = Vec::with_capacity(series.len());
        for s in series {
            let input = input_from_series(&[s], s.len())?;
            let (_, task) = self.forward(&input, Mode::Eval)?;
            out.push(task.expect("head present").into_data());
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, normalization: Option<&Normalization>) -> Result<()> {
        let doc = CheckpointDoc {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            normalization: normalization.cloned(),
            parameters: self
                .params
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.data().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Normalization>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<(Self, Option<Normalization>)> {
        let doc: CheckpointDoc = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                doc.format_version
            )));
        }
        let mut model = StImputeModel::new(doc.config)?;
        if doc.parameters.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                doc.parameters.len()
            )));
        }
        for (slot, rec) in model.params.iter_mut().zip(doc.parameters) {
            if slot.name != rec.name || slot.tensor.shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    rec.name,
                    rec.shape,
                    slot.name,
                    slot.tensor.shape()
                )));
            }
            let t = Tensor::new(rec.shape, rec.data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("parameter `{}` is not finite", rec.name)));
            }
            slot.tensor = t.with_requires_grad(true);
        }
        Ok((model, doc.normalization))
    }
}

fn strip(mut t: Tensor) -> Tensor {
    t.grad = None;
    t.requires_grad = false;
    t
}

/// Stack equal-length series into a model input using their natural
/// missingness as the availability mask.
pub fn input_from_series(series: &[&Series], seq_len: usize) -> Result<ModelInput> {
    let f = series.first().map_or(0, |s| s.n_features());
    let rows = series.len() * seq_len;
    let mut values = Vec::with_capacity(rows * f);
    let mut available = Vec::with_capacity(rows * f);
    for s in series {
        if s.len() != seq_len || s.n_features() != f {
            return Err(Error::Data(format!("series `{}` does not match batch shape", s.id)));
        }
        for (&v, &m) in s.values.iter().zip(&s.missing) {
            values.push(if m { 0.0 } else { v });
            available.push(if m { 0.0 } else { 1.0 });
        }
    }
    Ok(ModelInput {
        batch: series.len(),
        seq_len,
        values: Tensor::new(vec![rows, f], values)?,
        available: Tensor::new(vec![rows, f], available)?,
    })
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    config: ModelConfig,
    normalization: Option<Normalization>,
    parameters: Vec<ParamRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Series;
    use crate::tensor::matmul;

    fn tiny(task: Task) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            n_features: 2,
            task,
            init_seed: 3,
            ..ModelConfig::default()
        }
    }

    fn series(id: &str, n: usize, f: usize, missing: impl Fn(usize) -> bool) -> Series {
        let values = (0..n * f).map(|i| (i as f64 * 0.37).sin()).collect();
        Series::new(id.into(), n, f, values, (0..n * f).map(missing).collect(), None).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { d_model: 10, n_heads: 4, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { lambda: 1.0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn mask_channel_changes_the_embedding() {
        let model = StImputeModel::new(tiny(Task::None)).unwrap();
        let values = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
        let observed = model.embed_input(&values, &Tensor::zeros(&[3, 2])).unwrap();
        let missing = model.embed_input(&values, &Tensor::filled(&[3, 2], 1.0)).unwrap();
        assert_ne!(observed.data(), missing.data());
    }

    #[test]
    fn zero_embedding_weights_leave_positional_encoding() {
        let mut model = StImputeModel::new(tiny(Task::None)).unwrap();
        for p in model.params_mut().iter_mut().filter(|p| p.name.starts_with("embed")) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let values = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]);
        let out = model.embed_input(&values, &Tensor::zeros(&[4, 2])).unwrap();
        assert_eq!(out.data(), positional_encoding(4, 8).unwrap().data());
    }

    #[test]
    fn embedding_matches_straight_line_recomputation() {
        let model = StImputeModel::new(tiny(Task::None)).unwrap();
        let values = Tensor::from_rows(&[vec![0.3, -1.2], vec![0.8, 0.1], vec![-0.4, 2.0]]);
        let missing = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0], vec![1.0, 0.0]]);
        let out = model.embed_input(&values, &missing).unwrap();

        let w = &model.params()[0].tensor;
        let b = &model.params()[1].tensor;
        let mut joined = Vec::new();
        for r in 0..3 {
            for c in 0..2 {
                let m = missing.get2(r, c);
                joined.push(if m > 0.0 { 0.0 } else { values.get2(r, c) });
            }
            for c in 0..2 {
                joined.push(1.0 - missing.get2(r, c));
            }
        }
        let affine = matmul(&Tensor::new(vec![3, 4], joined).unwrap(), w).unwrap();
        let pe = positional_encoding(3, 8).unwrap();
        for r in 0..3 {
            for c in 0..8 {
                let expect = (affine.get2(r, c) + b.data()[c]).max(0.0) + pe.get2(r, c);
                assert!((out.get2(r, c) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn impute_preserves_observed_values() {
        let model = StImputeModel::new(tiny(Task::None)).unwrap();
        let full = series("a", 5, 2, |_| false);
        let out = model.impute(std::slice::from_ref(&full)).unwrap();
        assert_eq!(out[0], full.values);

        let sparse = series("b", 5, 2, |i| i != 3);
        let out = model.impute(std::slice::from_ref(&sparse)).unwrap();
        assert_eq!(out[0][3].to_bits(), sparse.values[3].to_bits());
        assert!(out[0].iter().all(|v| v.is_finite()));

        // Second pass over the completed series changes nothing.
        let mut again = sparse.clone();
        again.values = out[0].clone();
        let twice = model.impute(std::slice::from_ref(&again)).unwrap();
        for (i, m) in sparse.missing.iter().enumerate() {
            if !m {
                assert_eq!(twice[0][i].to_bits(), out[0][i].to_bits());
            }
        }
    }

    #[test]
    fn forward_shapes_and_eval_determinism() {
        let model = StImputeModel::new(tiny(Task::Classification { n_classes: 3 })).unwrap();
        let a = series("a", 6, 2, |i| i % 4 == 0);
        let b = series("b", 6, 2, |i| i % 3 == 0);
        let input = input_from_series(&[&a, &b], 6).unwrap();
        let (r1, t1) = model.forward(&input, Mode::Eval).unwrap();
        let (r2, t2) = model.forward(&input, Mode::Eval).unwrap();
        assert_eq!(r1.shape(), &[2, 6, 2]);
        assert_eq!(t1.as_ref().unwrap().shape(), &[2, 3]);
        assert_eq!(r1, r2);
        assert_eq!(t1, t2);
        let (d1, _) = model.forward(&input, Mode::Train { dropout_seed: 1 }).unwrap();
        let (d2, _) = model.forward(&input, Mode::Train { dropout_seed: 1 }).unwrap();
        assert_eq!(d1, d2);
        assert_ne!(d1, r1);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = StImputeModel::new(tiny(Task::Regression)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let norm = Normalization { mean: vec![0.5, -1.0], std: vec![2.0, 0.25] };
        model.save(&path, Some(&norm)).unwrap();
        let (loaded, loaded_norm) = StImputeModel::load(&path).unwrap();
        assert_eq!(loaded_norm.unwrap(), norm);
        let a = series("a", 7, 2, |i| i % 5 == 1);
        let input = input_from_series(&[&a], 7).unwrap();
        let (r1, t1) = model.forward(&input, Mode::Eval).unwrap();
        let (r2, t2) = loaded.forward(&input, Mode::Eval).unwrap();
        assert!(r1.data().iter().zip(r2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(t1.unwrap().data()[0].to_bits(), t2.unwrap().data()[0].to_bits());
    }

    #[test]
    fn checkpoint_rejects_tampering() {
        let model = StImputeModel::new(tiny(Task::None)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path, None).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let bad = text.replacen("\"format_version\": 1", "\"format_version\": 99", 1);
        assert!(StImputeModel::from_checkpoint_str(&bad).is_err());
        let bad = text.replacen("embed.w", "embed.x", 1);
        assert!(StImputeModel::from_checkpoint_str(&bad).is_err());
    }
}
