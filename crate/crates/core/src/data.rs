//! Time-series containers, long-format CSV I/O, per-channel normalisation and
//! the synthetic sinusoid generator.
//!
//! CSV layout: header `series_id,t,<feature...>[,label]`, one row per
//! timestep. An empty cell or `NaN` marks a missing value.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        }
    }
}

/// One multivariate series stored row-major as `[len × n_features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub id: String,
    pub times: Vec<f64>,
    n_features: usize,
    pub values: Vec<f64>,
    /// True where the value was not observed.
    pub missing: Vec<bool>,
    pub label: Option<Label>,
}

impl Series {
    pub fn new(
        id: String,
        len: usize,
        n_features: usize,
        values: Vec<f64>,
        missing: Vec<bool>,
        label: Option<Label>,
    ) -> Result<Self> {
        if values.len() != len * n_features || missing.len() != values.len() {
            return Err(Error::Data(format!(
                "series `{id}`: {} values / {} flags for {len}×{n_features}",
                values.len(),
                missing.len()
            )));
        }
        Ok(Series {
            id,
            times: (0..len).map(|t| t as f64).collect(),
            n_features,
            values,
            missing,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn observed_count(&self) -> usize {
        self.missing.iter().filter(|m| !**m).count()
    }

    pub fn value(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.n_features + f]
    }

    pub fn is_missing(&self, t: usize, f: usize) -> bool {
        self.missing[t * self.n_features + f]
    }
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Fit on the observed values of `series` only. Channels with zero
    /// spread (or no observations) are flagged and keep `std = 1`.
    pub fn fit(series: &[Series], n_features: usize) -> Self {
        let mut sum = vec![0.0; n_features];
        let mut sq = vec![0.0; n_features];
        let mut count = vec![0usize; n_features];
        for s in series {
            for (i, (&v, &m)) in s.values.iter().zip(&s.missing).enumerate() {
                if !m {
                    let f = i % n_features;
                    sum[f] += v;
                    count[f] += 1;
                }
            }
        }
        let mean: Vec<f64> = (0..n_features)
            .map(|f| if count[f] > 0 { sum[f] / count[f] as f64 } else { 0.0 })
            .collect();
        for s in series {
            for (i, (&v, &m)) in s.values.iter().zip(&s.missing).enumerate() {
                if !m {
                    let f = i % n_features;
                    sq[f] += (v - mean[f]).powi(2);
                }
            }
        }
        let std = (0..n_features)
            .map(|f| {
                let sd = if count[f] > 0 { (sq[f] / count[f] as f64).sqrt() } else { 0.0 };
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    warn!("channel {f} is constant or unobserved in the training split; std set to 1");
                    1.0
                }
            })
            .collect();
        Normalization { mean, std }
    }

    pub fn apply(&self, s: &mut Series) {
        let f = self.mean.len();
        for (i, v) in s.values.iter_mut().enumerate() {
            if !s.missing[i] {
                *v = (*v - self.mean[i % f]) / self.std[i % f];
            }
        }
    }

    pub fn invert_values(&self, values: &mut [f64]) {
        let f = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.std[i % f] + self.mean[i % f];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub series: Vec<Series>,
    pub task: Task,
}

impl Dataset {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn has_labels(&self) -> bool {
        self.series.iter().any(|s| s.label.is_some())
    }

    /// Seeded random split into `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction must be in [0, 1), got {test_fraction}")));
        }
        let mut idx: Vec<usize> = (0..self.series.len()).collect();
        idx.shuffle(&mut rng_for(seed, &[0x5711]));
        let n_test = ((self.series.len() as f64) * test_fraction).round() as usize;
        let (test_idx, train_idx) = idx.split_at(n_test);
        let pick = |ids: &[usize]| {
            let mut ids = ids.to_vec();
            ids.sort_unstable();
            Dataset {
                feature_names: self.feature_names.clone(),
                series: ids.iter().map(|&i| self.series[i].clone()).collect(),
                task: self.task,
            }
        };
        Ok((pick(train_idx), pick(test_idx)))
    }

    pub fn normalized(&self, norm: &Normalization) -> Dataset {
        let mut out = self.clone();
        out.series.iter_mut().for_each(|s| norm.apply(s));
        out
    }
}

fn parse_cell(cell: &str) -> std::result::Result<Option<f64>, String> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(format!("non-numeric cell `{cell}`")),
    }
}

fn infer_task(labels: &[f64]) -> Task {
    if labels.is_empty() {
        return Task::None;
    }
    let integral = labels.iter().all(|v| *v >= 0.0 && v.fract() == 0.0 && *v < 1000.0);
    if integral {
        let n_classes = labels.iter().fold(0.0f64, |m, v| m.max(*v)) as usize + 1;
        Task::Classification {
            n_classes: n_classes.max(2),
        }
    } else {
        Task::Regression
    }
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, &path.display().to_string())
}

/// Parse the long CSV layout from any reader. `source` names the input in errors.
pub fn read_csv<R: std::io::Read>(reader: R, source: &str) -> Result<Dataset> {
    let perr = |line: u64, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let headers = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "series_id" || cols[1] != "t" {
        return Err(perr(1, "header must start with `series_id,t` and name at least one feature".into()));
    }
    let has_label = cols.last() == Some(&"label");
    let feature_end = if has_label { cols.len() - 1 } else { cols.len() };
    if feature_end <= 2 {
        return Err(perr(1, "no feature columns".into()));
    }
    let feature_names: Vec<String> = cols[2..feature_end].iter().map(|s| s.to_string()).collect();
    let f = feature_names.len();

    struct Row {
        t: f64,
        values: Vec<Option<f64>>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<Row>> = HashMap::new();
    let mut labels: HashMap<String, f64> = HashMap::new();
    let mut seen: HashMap<(String, u64), u64> = HashMap::new();

    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            perr(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record[0].trim().to_string();
        if id.is_empty() {
            return Err(perr(line, "empty series_id".into()));
        }
        let t = parse_cell(&record[1])
            .map_err(|m| perr(line, m))?
            .ok_or_else(|| perr(line, "missing time index".into()))?;
        if let Some(prev) = seen.insert((id.clone(), t.to_bits()), line) {
            return Err(perr(line, format!("duplicate (series_id, t) = ({id}, {t}); first seen on line {prev}")));
        }
        let mut values = Vec::with_capacity(f);
        for c in 2..feature_end {
            values.push(parse_cell(&record[c]).map_err(|m| perr(line, m))?);
        }
        if has_label {
            if let Some(lab) = parse_cell(&record[feature_end]).map_err(|m| perr(line, m))? {
                match labels.get(&id) {
                    Some(prev) if *prev != lab => {
                        return Err(perr(line, format!("series `{id}` has conflicting labels {prev} and {lab}")))
                    }
                    _ => {
                        labels.insert(id.clone(), lab);
                    }
                }
            }
        }
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push(Row { t, values });
    }

    let label_values: Vec<f64> = order.iter().filter_map(|id| labels.get(id).copied()).collect();
    let task = infer_task(&label_values);
    let mut series = Vec::with_capacity(order.len());
    for id in order {
        let mut rs = rows.remove(&id).expect("id recorded");
        rs.sort_by(|a, b| a.t.total_cmp(&b.t));
        let len = rs.len();
        let mut values = Vec::with_capacity(len * f);
        let mut missing = Vec::with_capacity(len * f);
        for r in &rs {
            for v in &r.values {
                values.push(v.unwrap_or(0.0));
                missing.push(v.is_none());
            }
        }
        let label = labels.get(&id).map(|&v| match task {
            Task::Classification { .. } => Label::Class(v as usize),
            _ => Label::Value(v),
        });
        let mut s = Series::new(id, len, f, values, missing, label)?;
        s.times = rs.iter().map(|r| r.t).collect();
        series.push(s);
    }
    if series.is_empty() {
        return Err(perr(1, "no data rows".into()));
    }
    Ok(Dataset {
        feature_names,
        series,
        task,
    })
}

fn format_label(label: Label) -> String {
    match label {
        Label::Class(c) => c.to_string(),
        Label::Value(v) => v.to_string(),
    }
}

/// Write the long CSV layout. Missing entries become empty cells.
pub fn write_csv<W: std::io::Write>(writer: W, dataset: &Dataset) -> Result<()> {
    let has_label = dataset.has_labels();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["series_id".to_string(), "t".to_string()];
    header.extend(dataset.feature_names.iter().cloned());
    if has_label {
        header.push("label".into());
    }
    let csv_err = |e: csv::Error| Error::Data(format!("writing CSV: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    let f = dataset.n_features();
    for s in &dataset.series {
        for (t, time) in s.times.iter().enumerate() {
            let mut rec = vec![s.id.clone(), time.to_string()];
            for c in 0..f {
                let i = t * f + c;
                rec.push(if s.missing[i] { String::new() } else { s.values[i].to_string() });
            }
            if has_label {
                rec.push(s.label.map(format_label).unwrap_or_default());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Data(format!("writing CSV: {e}")))?;
    Ok(())
}

pub fn save_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(file), dataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    None,
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_series: usize,
    pub length: usize,
    pub n_features: usize,
    pub seed: u64,
    pub task: SyntheticTask,
}

pub const SYNTHETIC_NOISE_STD: f64 = 0.1;

/// Sums of two random-phase sinusoids per channel plus Gaussian noise.
///
/// Class 0 series (half of them, seeded order) draw frequencies from 1–3 cycles per series, class 1 from
/// 4–6 cycles; the regression target is the mean component amplitude.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_series == 0 || spec.length < 2 || spec.n_features == 0 {
        return Err(Error::Config("synthetic spec needs n_series ≥ 1, length ≥ 2, n_features ≥ 1".into()));
    }
    let noise = Normal::new(0.0, SYNTHETIC_NOISE_STD).expect("valid normal");
    // Classes are a seeded shuffle of an even split, so balance is exact.
    let mut classes: Vec<usize> = (0..spec.n_series).map(|i| i % 2).collect();
    classes.shuffle(&mut rng_for(spec.seed, &[0xC1A5]));
    let mut series = Vec::with_capacity(spec.n_series);
    for (i, &class) in classes.iter().enumerate() {
        let mut rng = rng_for(spec.seed, &[0x5E7, i as u64]);
        let band = if class == 0 { 1.0..3.0 } else { 4.0..6.0 };
        let mut comps = Vec::new();
        for _ in 0..spec.n_features {
            let c: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| {
                    (
                        rng.gen_range(0.5..1.5),
                        rng.gen_range(band.clone()),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            comps.push(c);
        }
        let mean_amp = comps.iter().flatten().map(|c| c.0).sum::<f64>() / (2 * spec.n_features) as f64;
        let mut values = Vec::with_capacity(spec.length * spec.n_features);
        for t in 0..spec.length {
            let x = t as f64 / spec.length as f64;
            for feature in &comps {
                let v: f64 = feature
                    .iter()
                    .map(|(a, fr, ph)| a * (std::f64::consts::TAU * fr * x + ph).sin())
                    .sum();
                values.push(v + noise.sample(&mut rng));
            }
        }
        let label = match spec.task {
            SyntheticTask::None => None,
            SyntheticTask::Classification => Some(Label::Class(class)),
            SyntheticTask::Regression => Some(Label::Value(mean_amp)),
        };
        let n = values.len();
        series.push(Series::new(format!("s{i}"), spec.length, spec.n_features, values, vec![false; n], label)?);
    }
    let task = match spec.task {
        SyntheticTask::None => Task::None,
        SyntheticTask::Classification => Task::Classification { n_classes: 2 },
        SyntheticTask::Regression => Task::Regression,
    };
    Ok(Dataset {
        feature_names: (0..spec.n_features).map(|f| format!("x{f}")).collect(),
        series,
        task,
    })
}
