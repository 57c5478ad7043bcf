//! Per-replicate records and their aggregation into cell summaries.

use std::collections::BTreeMap;

use tqte::dataset::fmt_real;

use crate::error::{SimError, SimResult};

pub const RECORD_HEADER: &str = "rep,method,metric,tau,value,message";

/// One long-format replicate measurement. `metric == "error"` rows carry a
/// message and no value.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub rep: usize,
    pub method: String,
    pub metric: String,
    pub tau: Option<f64>,
    pub value: f64,
    pub message: String,
}

impl Record {
    pub fn value(rep: usize, method: &str, metric: &str, tau: Option<f64>, value: f64) -> Self {
        Record {
            rep,
            method: method.to_string(),
            metric: metric.to_string(),
            tau,
            value,
            message: String::new(),
        }
    }

    pub fn error(rep: usize, method: &str, message: impl Into<String>) -> Self {
        Record {
            rep,
            method: method.to_string(),
            metric: "error".to_string(),
            tau: None,
            value: f64::NAN,
            message: message.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.metric == "error"
    }
}

fn opt_real(v: Option<f64>) -> String {
    v.map(fmt_real).unwrap_or_default()
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn records_to_csv(records: &[Record]) -> String {
    let mut out = String::from(RECORD_HEADER);
    out.push('\n');
    for r in records {
        let value = if r.is_error() { String::new() } else { fmt_real(r.value) };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.rep,
            r.method,
            r.metric,
            opt_real(r.tau),
            value,
            quote(&r.message)
        ));
    }
    out
}

pub fn records_from_csv(text: &str) -> SimResult<Vec<Record>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let bad = |m: String| SimError::Spec(format!("record file: {m}"));
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != RECORD_HEADER {
        return Err(bad("unexpected header".into()));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let real = |s: &str| -> SimResult<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|e| bad(format!("{s:?}: {e}")))
            }
        };
        out.push(Record {
            rep: row[0].parse().map_err(|e| bad(format!("rep {:?}: {e}", &row[0])))?,
            method: row[1].to_string(),
            metric: row[2].to_string(),
            tau: real(&row[3])?,
            value: real(&row[4])?.unwrap_or(f64::NAN),
            message: row[5].to_string(),
        });
    }
    Ok(out)
}

/// `Delta_hat` accuracy across replicates at one tau.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
    pub rmse: f64,
    pub reps: usize,
}

/// Bias, population variance and MSE with `MSE = bias^2 + variance`.
pub fn accuracy(estimates: &[f64], truth: f64) -> Option<Accuracy> {
    if estimates.is_empty() {
        return None;
    }
    let r = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / r;
    let variance = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / r;
    let mse = estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / r;
    Some(Accuracy {
        bias: mean - truth,
        variance,
        mse,
        rmse: mse.sqrt(),
        reps: estimates.len(),
    })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Key for a `(method, metric, tau)` series; taus are compared by bits.
pub type SeriesKey = (String, String, Option<u64>);

/// Groups values in replicate order.
pub fn series(records: &[Record]) -> BTreeMap<SeriesKey, Vec<f64>> {
    let mut sorted: Vec<&Record> = records.iter().filter(|r| !r.is_error()).collect();
    sorted.sort_by_key(|r| r.rep);
    let mut out: BTreeMap<SeriesKey, Vec<f64>> = BTreeMap::new();
    for r in sorted {
        out.entry((r.method.clone(), r.metric.clone(), r.tau.map(f64::to_bits)))
            .or_default()
            .push(r.value);
    }
    out
}

/// Error messages per method, with counts.
pub fn error_counts(records: &[Record]) -> BTreeMap<String, BTreeMap<String, usize>> {
    let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_error()) {
        *out.entry(r.method.clone()).or_default().entry(r.message.clone()).or_default() += 1;
    }
    out
}
