//! F1 scoring and seed-level aggregation of results tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Result};

/// `2TP / (2TP + FP + FN)` for `positive`; 0 when the denominator is 0.
pub fn f1_score(predictions: &[usize], truth: &[usize], positive: usize) -> Result<f64> {
    if predictions.len() != truth.len() {
        return config_err(format!("{} predictions for {} labels", predictions.len(), truth.len()));
    }
    if predictions.is_empty() {
        return data_err("F1 of an empty set");
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in predictions.iter().zip(truth) {
        match (p == positive, t == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub site: String,
    pub seed: u64,
    pub f1: f64,
    pub nll: f64,
    /// Estimated `P(Y=1)` at the test site, where the method produces one.
    pub p_y1_hat: Option<f64>,
    /// Wall-clock seconds; only recorded when timing is enabled.
    pub seconds: Option<f64>,
}

pub const RESULTS_HEADER: [&str; 7] = ["method", "site", "seed", "f1", "nll", "p_y1_hat", "seconds"];

pub fn write_results(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:?}"));
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.site.clone(),
            r.seed.to_string(),
            format!("{:?}", r.f1),
            format!("{:?}", r.nll),
            opt(r.p_y1_hat),
            opt(r.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return data_err(format!("{}: unexpected header {header:?}", path.display()));
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>().or_else(|_| data_err(format!("cannot parse {what} {s:?}")))
    };
    let opt = |s: &str, what: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s, what).map(Some)
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(MetricsRow {
            method: rec[0].to_string(),
            site: rec[1].to_string(),
            seed: rec[2].parse().or_else(|_| data_err(format!("bad seed {:?}", &rec[2])))?,
            f1: num(&rec[3], "f1")?,
            nll: num(&rec[4], "nll")?,
            p_y1_hat: opt(&rec[5], "p_y1_hat")?,
            seconds: opt(&rec[6], "seconds")?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub site: String,
    pub runs: usize,
    pub mean_f1: f64,
    /// Sample standard deviation over runs divided by `sqrt(runs)`.
    pub stderr_f1: f64,
}

pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Groups rows by `(method, site)`.
pub fn summarize(rows: &[MetricsRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return data_err("no results to summarize");
    }
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method.clone(), r.site.clone())).or_default().push(r.f1);
    }
    Ok(groups
        .into_iter()
        .map(|((method, site), f1s)| {
            let (mean_f1, stderr_f1) = mean_and_stderr(&f1s);
            SummaryRow { method, site, runs: f1s.len(), mean_f1, stderr_f1 }
        })
        .collect())
}

pub fn summarize_file(path: &Path) -> Result<Vec<SummaryRow>> {
    summarize(&read_results(path)?)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "site", "runs", "mean_f1", "stderr_f1"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.site.clone(),
            r.runs.to_string(),
            format!("{:.6}", r.mean_f1),
            format!("{:.6}", r.stderr_f1),
        ])?;
    }
    w.flush()?;
    Ok(())
}
