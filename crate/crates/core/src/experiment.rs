//! The evaluation sweep: train the learnable imputers once, corrupt the test
//! split under every (pattern, rate) cell, impute with every method and score
//! the held-out values in normalised space.
//!
//! Spec files use the flat config syntax with extra keys:
//!
//! ```text
//! dataset = data/train.csv        # or `synthetic`
//! synthetic_series = 200
//! synthetic_length = 48
//! synthetic_features = 2
//! synthetic_task = classification # none | classification | regression
//! synthetic_seed = 7
//! patterns = mcar, fixed-block, variable-block
//! rates = 0.1, 0.5, 0.9
//! methods = st-impute, transformer, mean, last, linear
//! test_fraction = 0.2
//! ```
//!
//! plus any model or training key. A relative dataset path is resolved
//! against the spec file's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};

use crate::attention::AttentionKind;
use crate::baselines::Baseline;
use crate::config::{parse_entries, read_text, RunConfig};
use crate::data::{generate_synthetic, load_csv, Dataset, Label, Normalization, Series, SyntheticSpec, SyntheticTask};
use crate::error::{Error, Result};
use crate::metrics::{auc_roc, mae, pr_auc, rmse};
use crate::missingness::{corrupt_dataset, Corruption, MissingnessSpec, Pattern};
use crate::model::{ModelConfig, StImputeModel, Task};
use crate::rng::derive_seed;
use crate::training::{train, EpochRecord, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Sparse-attention model.
    StImpute,
    /// Same network with softmax attention.
    Transformer,
    Baseline(Baseline),
}

impl Method {
    pub fn attention_kind(self) -> Option<AttentionKind> {
        match self {
            Method::StImpute => Some(AttentionKind::Sparse),
            Method::Transformer => Some(AttentionKind::Softmax),
            Method::Baseline(_) => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::StImpute => f.write_str("st-impute"),
            Method::Transformer => f.write_str("transformer"),
            Method::Baseline(b) => f.write_str(b.as_str()),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "st-impute" => Ok(Method::StImpute),
            "transformer" => Ok(Method::Transformer),
            other => other.parse().map(Method::Baseline),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub data: DataSource,
    pub patterns: Vec<Pattern>,
    pub rates: Vec<f64>,
    pub methods: Vec<Method>,
    pub test_fraction: f64,
    /// Model settings; `n_features` and `task` are taken from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn list<T: FromStr<Err = Error>>(value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&read_text(path)?, &path.display().to_string(), base)
    }

    pub fn parse(text: &str, source: &str, base_dir: &Path) -> Result<Self> {
        let mut run = RunConfig::default();
        let mut dataset: Option<String> = None;
        let mut synthetic = SyntheticSpec {
            n_series: 200,
            length: 48,
            n_features: 2,
            seed: 0,
            task: SyntheticTask::Classification,
        };
        let mut patterns = vec![Pattern::Mcar];
        let mut rates = Vec::new();
        let mut methods = Vec::new();
        let mut test_fraction = 0.2;
        for e in parse_entries(text, source)? {
            let wrap = |r: Result<()>| r.map_err(|err| e.error(source, err.to_string()));
            match e.key.as_str() {
                "dataset" => dataset = Some(e.value.clone()),
                "synthetic_series" => synthetic.n_series = e.parse(source)?,
                "synthetic_length" => synthetic.length = e.parse(source)?,
                "synthetic_features" => synthetic.n_features = e.parse(source)?,
                "synthetic_seed" => synthetic.seed = e.parse(source)?,
                "synthetic_task" => {
                    synthetic.task = match e.value.as_str() {
                        "none" => SyntheticTask::None,
                        "classification" => SyntheticTask::Classification,
                        "regression" => SyntheticTask::Regression,
                        other => return Err(e.error(source, format!("unknown synthetic task `{other}`"))),
                    }
                }
                "patterns" => wrap(list(&e.value).map(|v| patterns = v))?,
                "rates" => {
                    rates = e
                        .value
                        .split(',')
                        .map(|r| r.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|err| e.error(source, format!("bad rate list: {err}")))?
                }
                "methods" => wrap(list(&e.value).map(|v| methods = v))?,
                "test_fraction" => test_fraction = e.parse(source)?,
                _ => {
                    if !run.apply(&e, source)? {
                        return Err(e.error(source, format!("unknown key `{}`", e.key)));
                    }
                }
            }
        }
        let data = match dataset.as_deref() {
            None => return Err(Error::Config(format!("{source}: `dataset` is required"))),
            Some("synthetic") => DataSource::Synthetic(synthetic),
            Some(p) => DataSource::Csv(base_dir.join(p)),
        };
        let spec = ExperimentSpec {
            data,
            patterns,
            rates,
            methods,
            test_fraction,
            model: run.model,
            train: run.train,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.rates.is_empty() || self.patterns.is_empty() {
            return Err(Error::Config("experiment needs at least one method, pattern and rate".into()));
        }
        for &rate in &self.rates {
            MissingnessSpec::new(Pattern::Mcar, rate, 0)?;
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction must be in (0, 1), got {}", self.test_fraction)));
        }
        if let DataSource::Csv(p) = &self.data {
            if !p.exists() {
                return Err(Error::Config(format!("dataset `{}` does not exist", p.display())));
            }
        }
        self.train.validate()
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Csv(p) => load_csv(p),
            DataSource::Synthetic(s) => generate_synthetic(s),
        }
    }
}

/// One row of the report: a method scored on one (pattern, rate) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub pattern: Pattern,
    pub rate: f64,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    /// Number of held-out entries scored.
    pub count: usize,
    pub auc_roc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub downstream_rmse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImputationReport {
    pub rows: Vec<ReportRow>,
}

impl ImputationReport {
    pub fn get(&self, method: &str, pattern: Pattern, rate: f64) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.pattern == pattern && r.rate == rate)
    }

    /// RMSE of a cell, or an error naming the missing or failed cell.
    pub fn rmse(&self, method: &str, pattern: Pattern, rate: f64) -> Result<f64> {
        let row = self
            .get(method, pattern, rate)
            .ok_or_else(|| Error::contract(format!("no report row for {method} / {pattern} / {rate}")))?;
        row.rmse.ok_or_else(|| {
            Error::Data(format!(
                "{method} / {pattern} / {rate} failed: {}",
                row.error.as_deref().unwrap_or("no score")
            ))
        })
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let map = |e: csv::Error| Error::Data(format!("writing report: {e}"));
        w.write_record([
            "method",
            "pattern",
            "rate",
            "rmse",
            "mae",
            "count",
            "auc_roc",
            "pr_auc",
            "downstream_rmse",
            "error",
        ])
        .map_err(map)?;
        let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.pattern.to_string(),
                r.rate.to_string(),
                cell(r.rmse),
                cell(r.mae),
                r.count.to_string(),
                cell(r.auc_roc),
                cell(r.pr_auc),
                cell(r.downstream_rmse),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(map)?;
        }
        w.flush().map_err(|e| Error::Data(format!("writing report: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Everything a sweep produces.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub report: ImputationReport,
    /// Loss trace per trained method.
    pub traces: Vec<(Method, Vec<EpochRecord>)>,
    pub normalization: Normalization,
}

/// Model config for `data`, with attention switched to `kind`.
pub fn model_config_for(base: &ModelConfig, data: &Dataset, kind: AttentionKind) -> ModelConfig {
    ModelConfig {
        n_features: data.n_features(),
        task: data.task,
        attention_kind: kind,
        ..base.clone()
    }
}

/// Build and train a model on already-normalised series.
pub fn fit_model(config: ModelConfig, series: &[Series], train_cfg: &TrainConfig) -> Result<(StImputeModel, TrainOutcome)> {
    let mut model = StImputeModel::new(config)?;
    let outcome = train(&mut model, series, train_cfg)?;
    Ok((model, outcome))
}

struct Scored {
    rmse: f64,
    mae: f64,
    count: usize,
}

fn score_imputation(imputed: &[Vec<f64>], cells: &[Corruption]) -> Result<Scored> {
    let (mut pred, mut truth, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for (p, c) in imputed.iter().zip(cells) {
        pred.extend_from_slice(p);
        truth.extend_from_slice(&c.truth);
        mask.extend_from_slice(&c.holdout);
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("imputed values".into()));
    }
    Ok(Scored {
        rmse: rmse(&pred, &truth, &mask)?,
        mae: mae(&pred, &truth, &mask)?,
        count: mask.iter().filter(|m| **m).count(),
    })
}

#[derive(Default)]
struct Downstream {
    auc_roc: Option<f64>,
    pr_auc: Option<f64>,
    rmse: Option<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.iter().map(|e| e / z).collect()
}

/// Downstream scores of `model` on the corrupted series. Classification
/// reports one-vs-rest ranking metrics averaged over classes that have both
/// positives and negatives (just class 1 when binary).
fn score_downstream(model: &StImputeModel, series: &[Series]) -> Result<Downstream> {
    let labeled: Vec<&Series> = series.iter().filter(|s| s.label.is_some()).collect();
    if labeled.is_empty() {
        return Ok(Downstream::default());
    }
    let owned: Vec<Series> = labeled.iter().map(|s| (*s).clone()).collect();
    let outputs = model.predict_task(&owned)?;
    match model.config().task {
        Task::None => Ok(Downstream::default()),
        Task::Regression => {
            let pred: Vec<f64> = outputs.iter().map(|o| o[0]).collect();
            let truth: Vec<f64> = owned.iter().map(|s| s.label.map_or(0.0, Label::value)).collect();
            let mask = vec![true; pred.len()];
            Ok(Downstream {
                rmse: Some(rmse(&pred, &truth, &mask)?),
                ..Default::default()
            })
        }
        Task::Classification { n_classes } => {
            let probs: Vec<Vec<f64>> = outputs.iter().map(|o| softmax(o)).collect();
            let classes: Vec<usize> = if n_classes == 2 { vec![1] } else { (0..n_classes).collect() };
            let (mut roc, mut pr, mut n) = (0.0, 0.0, 0);
            for c in classes {
                let labels: Vec<bool> = owned.iter().map(|s| s.label.and_then(Label::class) == Some(c)).collect();
                if labels.iter().all(|l| *l) || labels.iter().all(|l| !*l) {
                    continue;
                }
                let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
                roc += auc_roc(&scores, &labels)?;
                pr += pr_auc(&scores, &labels)?;
                n += 1;
            }
            Ok(if n == 0 {
                Downstream::default()
            } else {
                Downstream {
                    auc_roc: Some(roc / n as f64),
                    pr_auc: Some(pr / n as f64),
                    rmse: None,
                }
            })
        }
    }
}

fn pattern_tag(p: Pattern) -> u64 {
    match p {
        Pattern::Mcar => 1,
        Pattern::FixedBlock => 2,
        Pattern::VariableBlock => 3,
    }
}

/// Run the full sweep described by `spec`.
///
/// Normalisation statistics come from the observed training values only.
/// A method that fails to train or impute gets rows with the error message;
/// other methods are unaffected.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let data = spec.load_data()?;
    let seed = spec.train.seed;
    let (train_raw, test_raw) = data.split(spec.test_fraction, derive_seed(seed, &[0xE5]))?;
    if train_raw.series.is_empty() || test_raw.series.is_empty() {
        return Err(Error::Data("train/test split left an empty side".into()));
    }
    let norm = Normalization::fit(&train_raw.series, data.n_features());
    let train_set = train_raw.normalized(&norm);
    let test_set = test_raw.normalized(&norm);

    let mut models: Vec<(Method, std::result::Result<StImputeModel, String>)> = Vec::new();
    let mut traces = Vec::new();
    for &method in &spec.methods {
        let Some(kind) = method.attention_kind() else { continue };
        if models.iter().any(|(m, _)| *m == method) {
            continue;
        }
        info!("training {method}");
        let cfg = model_config_for(&spec.model, &train_set, kind);
        match fit_model(cfg, &train_set.series, &spec.train) {
            Ok((model, outcome)) => {
                traces.push((method, outcome.trace));
                models.push((method, Ok(model)));
            }
            Err(e) => {
                warn!("{method} failed to train: {e}");
                models.push((method, Err(e.to_string())));
            }
        }
    }

    let mut report = ImputationReport::default();
    for &pattern in &spec.patterns {
        for &rate in &spec.rates {
            let mspec = MissingnessSpec::new(pattern, rate, derive_seed(seed, &[0xC0, pattern_tag(pattern), rate.to_bits()]))?;
            let cells = corrupt_dataset(&test_set, &mspec);
            for &method in &spec.methods {
                let mut row = ReportRow {
                    method: method.to_string(),
                    pattern,
                    rate,
                    rmse: None,
                    mae: None,
                    count: 0,
                    auc_roc: None,
                    pr_auc: None,
                    downstream_rmse: None,
                    error: None,
                };
                let outcome = (|| -> Result<()> {
                    let cells = cells.as_ref().map_err(|e| Error::Data(e.to_string()))?;
                    let corrupted: Vec<Series> = cells.iter().map(|c| c.corrupted.clone()).collect();
                    let imputed = match method {
                        Method::Baseline(b) => b.impute(&corrupted),
                        _ => {
                            let model = models
                                .iter()
                                .find(|(m, _)| *m == method)
                                .map(|(_, r)| r)
                                .expect("every learnable method was trained");
                            let model = model.as_ref().map_err(|e| Error::Data(format!("training failed: {e}")))?;
                            let imputed = model.impute(&corrupted)?;
                            if model.config().task != Task::None {
                                let d = score_downstream(model, &corrupted)?;
                                row.auc_roc = d.auc_roc;
                                row.pr_auc = d.pr_auc;
                                row.downstream_rmse = d.rmse;
                            }
                            imputed
                        }
                    };
                    let s = score_imputation(&imputed, cells)?;
                    row.rmse = Some(s.rmse);
                    row.mae = Some(s.mae);
                    row.count = s.count;
                    Ok(())
                })();
                if let Err(e) = outcome {
                    warn!("{method} on {pattern} @ {rate}: {e}");
                    row.error = Some(e.to_string());
                }
                report.rows.push(row);
            }
        }
    }
    Ok(ExperimentResult {
        report,
        traces,
        normalization: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing() {
        let text = "dataset = synthetic\nsynthetic_series = 20\npatterns = mcar, fixed-block\nrates = 0.1, 0.5\nmethods = mean, st-impute\nepochs = 2\nd_model = 16\n";
        let spec = ExperimentSpec::parse(text, "e.cfg", Path::new(".")).unwrap();
        assert_eq!(spec.patterns, vec![Pattern::Mcar, Pattern::FixedBlock]);
        assert_eq!(spec.rates, vec![0.1, 0.5]);
        assert_eq!(spec.methods, vec![Method::Baseline(Baseline::Mean), Method::StImpute]);
        assert_eq!(spec.train.epochs, 2);
        assert_eq!(spec.model.d_model, 16);
        match spec.data {
            DataSource::Synthetic(s) => assert_eq!(s.n_series, 20),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn spec_errors() {
        let base = Path::new(".");
        assert!(ExperimentSpec::parse("rates = 0.5\nmethods = mean\n", "e", base).is_err());
        assert!(ExperimentSpec::parse("dataset = synthetic\nrates = 0.5\nmethods = bogus\n", "e", base).is_err());
        assert!(ExperimentSpec::parse("dataset = synthetic\nrates = 1.5\nmethods = mean\n", "e", base).is_err());
        assert!(ExperimentSpec::parse("dataset = synthetic\nmethods = mean\n", "e", base).is_err());
        assert!(ExperimentSpec::parse("dataset = nowhere.csv\nrates = 0.5\nmethods = mean\n", "e", base).is_err());
        assert!(ExperimentSpec::parse("dataset = synthetic\nrates = 0.5\nmethods = mean\nfoo = 1\n", "e", base).is_err());
    }

    fn baseline_spec() -> ExperimentSpec {
        ExperimentSpec {
            data: DataSource::Synthetic(SyntheticSpec {
                n_series: 30,
                length: 24,
                n_features: 2,
                seed: 1,
                task: SyntheticTask::Classification,
            }),
            patterns: vec![Pattern::Mcar, Pattern::FixedBlock],
            rates: vec![0.1, 0.5],
            methods: vec![Method::Baseline(Baseline::Mean), Method::Baseline(Baseline::Linear)],
            test_fraction: 0.3,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }

    #[test]
    fn baseline_sweep_rows_and_counts() {
        let result = run_experiment(&baseline_spec()).unwrap();
        assert_eq!(result.report.rows.len(), 2 * 2 * 2);
        for r in &result.report.rows {
            assert!(r.error.is_none(), "{r:?}");
            assert!(r.rmse.unwrap() >= r.mae.unwrap());
            assert!(r.count > 0);
        }
        // Interpolation exploits temporal structure that the mean ignores.
        let lin = result.report.rmse("linear", Pattern::Mcar, 0.1).unwrap();
        let mean = result.report.rmse("mean", Pattern::Mcar, 0.1).unwrap();
        assert!(lin < 0.5 * mean, "{lin} vs {mean}");
    }

    #[test]
    fn failures_are_isolated_per_cell() {
        let mut spec = baseline_spec();
        spec.methods.push(Method::StImpute);
        // An invalid model config makes only the learnable method fail.
        spec.model.d_model = 15;
        let result = run_experiment(&spec).unwrap();
        for r in &result.report.rows {
            if r.method == "st-impute" {
                assert!(r.error.is_some() && r.rmse.is_none());
            } else {
                assert!(r.error.is_none() && r.rmse.is_some());
            }
        }
    }

    #[test]
    fn report_csv_header() {
        let mut out = Vec::new();
        ImputationReport::default().write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "method,pattern,rate,rmse,mae,count,auc_roc,pr_auc,downstream_rmse,error\n"
        );
    }
}
