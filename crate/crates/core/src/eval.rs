//! Accuracy and F1 over repeated runs, with Table-style rendering.
//!
//! Malignant (label 1) is the positive class. Standard deviations are sample
//! (n - 1) deviations, reported as 0 for a single run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no samples")]
    Empty,
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("row name must not be empty")]
    EmptyName,
    #[error("predictions row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (1, 1) => cm.tp += 1,
            (1, 0) => cm.fp += 1,
            (0, 1) => cm.fn_ += 1,
            (0, 0) => cm.tn += 1,
            (p, l) => return Err(EvalError::BadLabel(if p > 1 { p } else { l })),
        }
    }
    Ok(cm)
}

/// Returns `(accuracy, f1)` as fractions.
pub fn metrics(cm: &ConfusionMatrix) -> Result<(f64, f64), EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let accuracy = (cm.tp + cm.tn) as f64 / total as f64;
    if cm.tp == 0 {
        // Precision or recall is zero (or undefined, taken as zero).
        return Ok((accuracy, 0.0));
    }
    // 2PR/(P+R) simplifies to 2tp / (2tp + fp + fn).
    let f1 = 2.0 * cm.tp as f64 / (2 * cm.tp + cm.fp + cm.fn_) as f64;
    Ok((accuracy, f1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunResult {
    pub run_id: u32,
    pub accuracy: f64,
    pub f1: f64,
}

/// Means and standard deviations in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub n_runs: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

pub fn aggregate(runs: &[RunResult]) -> Result<EvalReport, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::Empty);
    }
    let acc: Vec<f64> = runs.iter().map(|r| 100.0 * r.accuracy).collect();
    let f1: Vec<f64> = runs.iter().map(|r| 100.0 * r.f1).collect();
    let (mean_acc, std_acc) = mean_std(&acc);
    let (mean_f1, std_f1) = mean_std(&f1);
    Ok(EvalReport {
        mean_acc,
        std_acc,
        mean_f1,
        std_f1,
        n_runs: runs.len(),
    })
}

/// `"91.48 (1.52)"`
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.2} ({std:.2})")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    name: String,
    pub validation: Option<EvalReport>,
    pub test: EvalReport,
}

impl TableRow {
    pub fn new(name: impl Into<String>, validation: Option<EvalReport>, test: EvalReport) -> Result<Self, EvalError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(EvalError::EmptyName);
        }
        Ok(Self { name, validation, test })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

pub fn render_table(rows: &[TableRow]) -> String {
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max("model".len());
    let cell_w = 14;
    let n_runs = rows.iter().map(|r| r.test.n_runs).max().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# mean (sample std) in percent over {n_runs} run(s); positive class = malignant"
    );
    let _ = writeln!(
        out,
        "{:<name_w$} | {:>cell_w$} | {:>cell_w$} | {:>cell_w$} | {:>cell_w$}",
        "model", "val acc", "val F1", "test acc", "test F1"
    );
    let _ = writeln!(out, "{}", "-".repeat(name_w + 4 * (cell_w + 3)));
    for r in rows {
        let (va, vf) = match r.validation {
            Some(v) => (format_cell(v.mean_acc, v.std_acc), format_cell(v.mean_f1, v.std_f1)),
            None => ("-".to_string(), "-".to_string()),
        };
        let _ = writeln!(
            out,
            "{:<name_w$} | {:>cell_w$} | {:>cell_w$} | {:>cell_w$} | {:>cell_w$}",
            r.name,
            va,
            vf,
            format_cell(r.test.mean_acc, r.test.std_acc),
            format_cell(r.test.mean_f1, r.test.std_f1),
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub run_id: u32,
    pub sample_id: String,
    pub true_label: u8,
    pub pred_label: u8,
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    run_id: u32,
    sample_id: String,
    true_label: u8,
    pred_label: u8,
    #[serde(default)]
    prob: Option<f64>,
}

/// Reads `run_id,sample_id,true_label,pred_label[,prob]`. When `prob` is
/// present it overrides `pred_label` via a 0.5 threshold.
pub fn read_predictions_csv<R: Read>(input: R) -> Result<Vec<Prediction>, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<PredictionRow>().enumerate() {
        let row = row?;
        let bad = |message: String| EvalError::Row { row: i + 1, message };
        if row.true_label > 1 || row.pred_label > 1 {
            return Err(bad("labels must be 0 or 1".into()));
        }
        let pred_label = match row.prob {
            Some(p) if !(0.0..=1.0).contains(&p) => return Err(bad(format!("probability {p} out of range"))),
            Some(p) => (p >= 0.5) as u8,
            None => row.pred_label,
        };
        out.push(Prediction {
            run_id: row.run_id,
            sample_id: row.sample_id,
            true_label: row.true_label,
            pred_label,
        });
    }
    Ok(out)
}

/// Per-run accuracy and F1, ordered by run id.
pub fn runs_from_predictions(preds: &[Prediction]) -> Result<Vec<RunResult>, EvalError> {
    let mut by_run: BTreeMap<u32, (Vec<u8>, Vec<u8>)> = BTreeMap::new();
    for p in preds {
        let e = by_run.entry(p.run_id).or_default();
        e.0.push(p.pred_label);
        e.1.push(p.true_label);
    }
    by_run
        .into_iter()
        .map(|(run_id, (p, l))| {
            let (accuracy, f1) = metrics(&confusion(&p, &l)?)?;
            Ok(RunResult { run_id, accuracy, f1 })
        })
        .collect()
}
