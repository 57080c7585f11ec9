//! Hierarchical evaluation: top-1 accuracy, mistake severity and HD@1.
//!
//! Severity averages the hierarchical distance over incorrect predictions
//! only; HD@1 averages it over all predictions, so
//! `hd_at_1 = severity * (1 - top1)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{DistanceMatrix, LabelHierarchy};
use crate::zeroshot::{ImagePrediction, PredictionRecord};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    EmptyInput,
    #[error("label `{0}` is not a class of the hierarchy")]
    UnknownLabel(String),
    #[error("{predicted} predictions but {truth} ground-truth labels")]
    LengthMismatch { predicted: usize, truth: usize },
}

impl EvalError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::EmptyInput => "EmptyInput",
            Self::UnknownLabel(_) => "UnknownLabel",
            Self::LengthMismatch { .. } => "LengthMismatch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub severity: u32,
    pub count: u64,
}

/// Mistake counts per severity 1..=height. Correct predictions are not
/// counted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeverityHistogram {
    bins: Vec<HistogramBin>,
}

impl SeverityHistogram {
    fn empty(height: u32) -> Self {
        Self {
            bins: (1..=height)
                .map(|severity| HistogramBin { severity, count: 0 })
                .collect(),
        }
    }

    pub fn bins(&self) -> &[HistogramBin] {
        &self.bins
    }

    pub fn count(&self, severity: u32) -> u64 {
        self.bins
            .iter()
            .find(|b| b.severity == severity)
            .map_or(0, |b| b.count)
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("severity,count\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{}", b.severity, b.count);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub strategy: String,
    pub n_total: u64,
    pub n_mistakes: u64,
    pub top1: f64,
    /// 0 when there are no mistakes, with `no_mistakes` set.
    pub severity: f64,
    pub no_mistakes: bool,
    pub hd_at_1: f64,
    pub histogram: SeverityHistogram,
}

impl EvalReport {
    pub fn with_tags(mut self, dataset: &str, strategy: &str) -> Self {
        self.dataset = dataset.to_string();
        self.strategy = strategy.to_string();
        self
    }

    pub fn error_rate(&self) -> f64 {
        1.0 - self.top1
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn check(predicted: &[usize], truth: &[usize], d: &DistanceMatrix) -> Result<(), EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if let Some(bad) = predicted.iter().chain(truth).find(|&&c| c >= d.k()) {
        return Err(EvalError::UnknownLabel(format!("#{bad}")));
    }
    Ok(())
}

/// Mistake counts per severity.
pub fn severity_histogram(
    predicted: &[usize],
    truth: &[usize],
    d: &DistanceMatrix,
) -> Result<SeverityHistogram, EvalError> {
    check(predicted, truth, d)?;
    let mut hist = SeverityHistogram::empty(d.height());
    for (&p, &t) in predicted.iter().zip(truth) {
        if p != t {
            let s = d.get(p, t);
            // a zero-distance mistake only arises from a degenerate matrix
            if s > 0 {
                hist.bins[(s - 1) as usize].count += 1;
            }
        }
    }
    Ok(hist)
}

/// Class indices are positions in the distance matrix's class order.
pub fn evaluate(predicted: &[usize], truth: &[usize], d: &DistanceMatrix) -> Result<EvalReport, EvalError> {
    let histogram = severity_histogram(predicted, truth, d)?;
    let n_total = predicted.len() as u64;
    let mut n_mistakes = 0u64;
    let mut distance_sum = 0u64;
    for (&p, &t) in predicted.iter().zip(truth) {
        if p != t {
            n_mistakes += 1;
            distance_sum += u64::from(d.get(p, t));
        }
    }
    let n_correct = n_total - n_mistakes;
    let no_mistakes = n_mistakes == 0;
    Ok(EvalReport {
        dataset: String::new(),
        strategy: String::new(),
        n_total,
        n_mistakes,
        top1: n_correct as f64 / n_total as f64,
        severity: if no_mistakes {
            0.0
        } else {
            distance_sum as f64 / n_mistakes as f64
        },
        no_mistakes,
        hd_at_1: distance_sum as f64 / n_total as f64,
        histogram,
    })
}

/// Evaluates in-memory predictions; the strategy tag is taken from the first one.
pub fn evaluate_predictions(preds: &[ImagePrediction], d: &DistanceMatrix) -> Result<EvalReport, EvalError> {
    let predicted: Vec<usize> = preds.iter().map(|p| p.prediction.predicted).collect();
    let truth: Vec<usize> = preds.iter().map(|p| p.truth).collect();
    let strategy = preds
        .first()
        .map(|p| p.prediction.strategy.to_string())
        .unwrap_or_default();
    Ok(evaluate(&predicted, &truth, d)?.with_tags("", &strategy))
}

/// Evaluates records read from a predictions file against a hierarchy.
pub fn evaluate_records(records: &[PredictionRecord], h: &LabelHierarchy) -> Result<EvalReport, EvalError> {
    let index = |name: &str| h.class_index(name).map_err(|_| EvalError::UnknownLabel(name.to_string()));
    let predicted = records
        .iter()
        .map(|r| index(&r.predicted))
        .collect::<Result<Vec<_>, _>>()?;
    let truth = records
        .iter()
        .map(|r| index(&r.label))
        .collect::<Result<Vec<_>, _>>()?;
    let strategy = records.first().map(|r| r.strategy.clone()).unwrap_or_default();
    Ok(evaluate(&predicted, &truth, &h.distance_matrix())?.with_tags("", &strategy))
}

/// Unweighted mean of the three headline metrics across reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageSummary {
    pub n_reports: usize,
    pub top1: f64,
    pub severity: f64,
    pub hd_at_1: f64,
}

pub fn cross_dataset_average(reports: &[EvalReport]) -> Result<AverageSummary, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(AverageSummary {
        n_reports: reports.len(),
        top1: mean(|r| r.top1),
        severity: mean(|r| r.severity),
        hd_at_1: mean(|r| r.hd_at_1),
    })
}

pub const CSV_HEADER: &str = "dataset,strategy,top1,severity,hd_at_1,no_mistakes,n_total,n_mistakes";

/// Comma-separated table in Top1, Severity, HD@1 column order.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&r.dataset),
            csv_field(&r.strategy),
            r.top1,
            r.severity,
            r.hd_at_1,
            u8::from(r.no_mistakes),
            r.n_total,
            r.n_mistakes
        );
    }
    out
}

/// (dataset, metric, value) rows with top-1 accuracy turned into an error
/// rate, so that every metric is lower-is-better.
pub fn radar_feed_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("dataset,strategy,metric,value\n");
    for r in reports {
        let d = csv_field(&r.dataset);
        let s = csv_field(&r.strategy);
        let _ = writeln!(out, "{d},{s},top1_error,{}", r.error_rate());
        let _ = writeln!(out, "{d},{s},severity,{}", r.severity);
        let _ = writeln!(out, "{d},{s},hd_at_1,{}", r.hd_at_1);
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
