//! Merged long-format report.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use tqte::dataset::fmt_real;

use crate::error::{SimError, SimResult};

pub const REPORT_HEADER: &str = "experiment,cell,n,grid,method,tau,metric,value";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub cell: String,
    pub n: usize,
    pub grid: String,
    /// `-` for cell-level quantities.
    pub method: String,
    pub tau: Option<f64>,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub id: String,
    pub params: Vec<(String, String)>,
    pub n: usize,
    pub grid: String,
    pub reps: usize,
    /// method -> message -> count.
    pub errors: BTreeMap<String, BTreeMap<String, usize>>,
    pub resumed: bool,
}

impl CellSummary {
    pub fn failures(&self) -> usize {
        self.errors.values().flat_map(|m| m.values()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub reps: usize,
    pub cells: Vec<CellSummary>,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.experiment,
                r.cell,
                r.n,
                r.grid,
                r.method,
                r.tau.map(fmt_real).unwrap_or_default(),
                r.metric,
                fmt_real(r.value)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> SimResult<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
        f.write_all(self.to_csv_string().as_bytes()).map_err(|e| SimError::io(path, e))
    }

    pub fn cell(&self, id: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.id == id)
    }

    /// Looks up one value; `tau = None` for tau-free metrics.
    pub fn value(&self, cell: &str, method: &str, metric: &str, tau: Option<f64>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.cell == cell
                    && r.method == method
                    && r.metric == metric
                    && match (r.tau, tau) {
                        (None, None) => true,
                        (Some(a), Some(b)) => (a - b).abs() < 1e-9,
                        _ => false,
                    }
            })
            .map(|r| r.value)
    }

    /// Cells whose parameters include every `(name, value)` pair.
    pub fn cells_with(&self, filter: &[(&str, &str)]) -> Vec<&CellSummary> {
        self.cells
            .iter()
            .filter(|c| filter.iter().all(|(k, v)| c.params.iter().any(|(pk, pv)| pk == k && pv == v)))
            .collect()
    }

    pub fn total_failures(&self) -> usize {
        self.cells.iter().map(CellSummary::failures).sum()
    }

    /// Compact per-cell table for terminal output.
    pub fn summary_table(&self, metric: &str) -> String {
        let mut out = format!("{:<40} {:<14} {:>8} {:>12}\n", "cell", "method", "tau", metric);
        for r in self.rows.iter().filter(|r| r.metric == metric) {
            out.push_str(&format!(
                "{:<40} {:<14} {:>8} {:>12.5}\n",
                r.cell,
                r.method,
                r.tau.map(|t| format!("{t:.2}")).unwrap_or_else(|| "-".into()),
                r.value
            ));
        }
        out
    }
}
