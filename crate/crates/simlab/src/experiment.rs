//! Monte Carlo replication harness.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use tqte::distribution::{oracle_grid_error, MonotoneCdf};
use tqte::inference::{ess_omega, multiplier_band, qte_pointwise};
use tqte::onestep::{
    estimate_ipw_values, estimate_nos_values, estimate_oracle_values, estimate_plugin_values,
    estimate_sa_values, estimate_source_values, CdfEstimate,
};
use tqte::pipeline::{fit_nuisances_with, FittedNuisances, Nuisances, NuisanceValues, OmegaSpec};
use tqte::seed::derive_seed;
use tqte::{Arm, FoldAssignment, TauGrid, ThresholdGrid, TwoSampleDataset};

use crate::config::{Cell, Estimator, ExperimentConfig};
use crate::error::{SimError, SimResult};
use crate::metrics::{accuracy, error_counts, mean, records_from_csv, records_to_csv, series, Record};
use crate::report::{CellSummary, ExperimentReport, ReportRow};
use crate::theory::theory_ratio;
use crate::truth::{compute_truth, TruthTable};

/// Sub-stream ids under a replicate seed.
const STREAM_DATA: u64 = 0;
const STREAM_FOLDS: u64 = 1;
const STREAM_FIT: u64 = 2;
const STREAM_BAND: u64 = 3;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `0` uses the rayon default.
    pub workers: usize,
    /// Where per-cell checkpoints and the merged report go.
    pub out_dir: Option<PathBuf>,
    /// Reuse matching per-cell checkpoints.
    pub resume: bool,
    /// Keep only cells whose parameters match all pairs.
    pub cell_filter: Vec<(String, String)>,
}

pub fn replicate_seed(master: u64, cell: &Cell, rep: usize) -> u64 {
    derive_seed(master, &[cell.key(), rep as u64])
}

fn tau_position(truth: &TruthTable, tau: f64) -> usize {
    truth
        .taus
        .iter()
        .position(|&t| (t - tau).abs() < 1e-9)
        .expect("truth covers every reported tau")
}

struct CellContext<'a> {
    config: &'a ExperimentConfig,
    cell: &'a Cell,
    truth: &'a TruthTable,
    taus: TauGrid,
    band_taus: Option<TauGrid>,
}

struct ArmPair {
    est: [CdfEstimate; 2],
    cdf: [MonotoneCdf; 2],
}

fn project(est: [CdfEstimate; 2]) -> SimResult<ArmPair> {
    let cdf = [
        MonotoneCdf::project(est[0].grid.clone(), &est[0].raw)?,
        MonotoneCdf::project(est[1].grid.clone(), &est[1].raw)?,
    ];
    Ok(ArmPair { est, cdf })
}

fn both<F>(mut f: F) -> SimResult<[CdfEstimate; 2]>
where
    F: FnMut(Arm) -> SimResult<CdfEstimate>,
{
    Ok([f(Arm::Control)?, f(Arm::Treated)?])
}

impl CellContext<'_> {
    fn grid(&self) -> SimResult<ThresholdGrid> {
        let (lo, hi) = self.truth.y_range;
        Ok(self.cell.grid.build(self.cell.n, lo, hi)?)
    }

    fn true_delta(&self, tau: f64) -> f64 {
        self.truth.delta[tau_position(self.truth, tau)]
    }

    fn run_rep(&self, rep: usize) -> Vec<Record> {
        let seed = replicate_seed(self.config.seed, self.cell, rep);
        match self.rep_inner(rep, seed) {
            Ok(records) => records,
            Err(e) => self
                .config
                .methods
                .iter()
                .map(|m| Record::error(rep, m.label(), e.to_string()))
                .collect(),
        }
    }

    fn rep_inner(&self, rep: usize, seed: u64) -> SimResult<Vec<Record>> {
        let cfg = self.config;
        let dgp = &self.cell.dgp;
        let (ds, full) = dgp.generate_with_full(self.cell.n, derive_seed(seed, &[STREAM_DATA]))?;
        let folds = FoldAssignment::for_dataset(&ds, cfg.folds, derive_seed(seed, &[STREAM_FOLDS]))?;
        let grid = self.grid()?;
        let fitted = if cfg.methods.iter().any(|m| m.needs_fit()) {
            let mut ncfg = cfg.nuisance.clone();
            if !cfg.methods.contains(&Estimator::Nos) {
                ncfg.nos = None;
            }
            let known = matches!(ncfg.omega, OmegaSpec::Known).then(|| dgp.omega_fn());
            Some(
                fit_nuisances_with(&ds, &folds, &grid, &ncfg, derive_seed(seed, &[STREAM_FIT]), known)
                    .map_err(|e| e.to_string()),
            )
        } else {
            None
        };
        let values = match &fitted {
            Some(Ok(f)) => Some(Arm::BOTH.map(|a| f.values(&ds, &folds, a).map_err(|e| e.to_string()))),
            _ => None,
        };
        let mut out = Vec::new();
        if let (true, Some([Ok(v), _])) = (cfg.methods.contains(&Estimator::Sa), values.as_ref()) {
            let w: Vec<f64> = (0..ds.n()).filter(|&i| ds.get(i).is_source()).map(|i| v.omega[i]).collect();
            let ess = ess_omega(&w)?;
            out.push(Record::value(rep, "SA", "ess_omega", None, ess));
            out.push(Record::value(rep, "SA", "ess_fraction", None, ess / w.len() as f64));
        }
        for (mi, &method) in cfg.methods.iter().enumerate() {
            let res = match (&fitted, method.needs_fit()) {
                (Some(Err(e)), true) => Err(SimError::Spec(format!("nuisance fit failed: {e}"))),
                _ => self.estimate(method, &ds, &full, &folds, &grid, fitted.as_ref().and_then(|f| f.as_ref().ok()), values.as_ref()),
            };
            match res.and_then(|pair| self.measure(rep, method, mi, seed, pair)) {
                Ok(mut recs) => out.append(&mut recs),
                Err(e) => out.push(Record::error(rep, method.label(), e.to_string())),
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn estimate(
        &self,
        method: Estimator,
        ds: &TwoSampleDataset,
        full: &TwoSampleDataset,
        folds: &FoldAssignment,
        grid: &ThresholdGrid,
        fitted: Option<&FittedNuisances>,
        values: Option<&[Result<NuisanceValues, String>; 2]>,
    ) -> SimResult<ArmPair> {
        let dgp = &self.cell.dgp;
        let fitted_values = |arm: Arm| -> SimResult<NuisanceValues> {
            match values {
                Some(v) => v[arm.index()].clone().map_err(SimError::Spec),
                None => Err(SimError::Spec("nuisances were not fitted".into())),
            }
        };
        let est = match method {
            Estimator::Sa => both(|a| Ok(estimate_sa_values(ds, &fitted_values(a)?)?))?,
            Estimator::SaTrueOmega => both(|a| {
                let mut v = fitted_values(a)?;
                for (i, w) in v.omega.iter_mut().enumerate() {
                    *w = dgp.omega(ds.get(i).x());
                }
                Ok(estimate_sa_values(ds, &v)?)
            })?,
            Estimator::Nos => {
                let f = fitted.ok_or_else(|| SimError::Spec("nuisances were not fitted".into()))?;
                both(|a| Ok(estimate_nos_values(ds, &f.nos_values(ds, folds, a)?)?))?
            }
            Estimator::Ipw => both(|a| Ok(estimate_ipw_values(ds, &fitted_values(a)?)?))?,
            Estimator::Plugin => both(|a| Ok(estimate_plugin_values(ds, &fitted_values(a)?)?))?,
            Estimator::Source => both(|a| Ok(estimate_source_values(ds, &fitted_values(a)?)?))?,
            Estimator::Oracle => {
                let oracle = dgp.oracle_nuisances(grid, false);
                both(|a| Ok(estimate_oracle_values(ds, &oracle.values(ds, folds, a)?, false)?))?
            }
            Estimator::FullOracle => {
                let oracle = dgp.oracle_nuisances(grid, true);
                let single = FoldAssignment::single(full.n());
                both(|a| Ok(estimate_oracle_values(full, &oracle.values(full, &single, a)?, true)?))?
            }
        };
        project(est)
    }

    fn measure(
        &self,
        rep: usize,
        method: Estimator,
        method_index: usize,
        seed: u64,
        pair: ArmPair,
    ) -> SimResult<Vec<Record>> {
        let inf = &self.config.inference;
        let label = method.label();
        let mut out = Vec::new();
        let d_iso = pair.cdf[0].d_iso().max(pair.cdf[1].d_iso());
        out.push(Record::value(rep, label, "d_iso", None, d_iso));
        if !method.has_influence() {
            for &tau in self.taus.levels() {
                let d = pair.cdf[1].quantile(tau).value - pair.cdf[0].quantile(tau).value;
                out.push(Record::value(rep, label, "delta_hat", Some(tau), d));
            }
            return Ok(out);
        }
        let [e0, e1] = &pair.est;
        let q = qte_pointwise(e1, e0, &pair.cdf[1], &pair.cdf[0], &self.taus, inf.alpha, &inf.bandwidth)?;
        for (l, &tau) in q.taus.iter().enumerate() {
            let truth = self.true_delta(tau);
            out.push(Record::value(rep, label, "delta_hat", Some(tau), q.delta[l]));
            out.push(Record::value(rep, label, "se", Some(tau), q.se[l]));
            out.push(Record::value(rep, label, "cover", Some(tau), f64::from(u8::from(q.lo[l] <= truth && truth <= q.hi[l]))));
            out.push(Record::value(rep, label, "ci_length", Some(tau), q.hi[l] - q.lo[l]));
            out.push(Record::value(rep, label, "floored", Some(tau), f64::from(u8::from(q.floored(l)))));
        }
        if let (Some(band_cfg), Some(btaus)) = (&inf.band, &self.band_taus) {
            let qb = qte_pointwise(e1, e0, &pair.cdf[1], &pair.cdf[0], btaus, inf.alpha, &inf.bandwidth)?;
            let bseed = derive_seed(seed, &[STREAM_BAND, method_index as u64]);
            let band = multiplier_band(&qb, band_cfg.draws, inf.alpha, bseed, band_cfg.multiplier)?;
            let mut sup = 0.0f64;
            let mut covered = true;
            for (l, &tau) in qb.taus.iter().enumerate() {
                let truth = self.true_delta(tau);
                sup = sup.max((qb.delta[l] - truth).abs());
                if !band.excluded.contains(&l) {
                    covered &= band.lo[l] <= truth && truth <= band.hi[l];
                }
            }
            let width = mean(&band.lo.iter().zip(&band.hi).map(|(a, b)| b - a).collect::<Vec<_>>()).unwrap_or(0.0);
            out.push(Record::value(rep, label, "sup_error", None, sup));
            out.push(Record::value(rep, label, "uniform_cover", None, f64::from(u8::from(covered))));
            out.push(Record::value(rep, label, "band_width", None, width));
            out.push(Record::value(rep, label, "critical", None, band.critical));
        }
        Ok(out)
    }
}

fn fingerprint(config: &ExperimentConfig, cell: &Cell) -> String {
    let text = format!("{}\n{}", config.to_json(), cell.id);
    format!("{:016x}", crate::config::fnv1a(text.as_bytes()))
}

fn write_atomic(path: &Path, contents: &str) -> SimResult<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| SimError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| SimError::io(path, e))
}

fn load_checkpoint(dir: &Path, stem: &str, fp: &str) -> SimResult<Option<Vec<Record>>> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let fp_path = dir.join(format!("{stem}.fingerprint"));
    let (Ok(text), Ok(saved)) = (std::fs::read_to_string(&csv_path), std::fs::read_to_string(&fp_path)) else {
        return Ok(None);
    };
    if saved.trim() != fp {
        log::info!("checkpoint {} is stale; recomputing", csv_path.display());
        return Ok(None);
    }
    records_from_csv(&text).map(Some).map_err(|e| SimError::Checkpoint {
        path: csv_path,
        message: e.to_string(),
    })
}

/// Ground truth for every distinct DGP in the design, computed once each.
pub fn truth_tables(config: &ExperimentConfig, cells: &[Cell]) -> SimResult<Vec<TruthTable>> {
    let taus = config.truth_taus()?;
    let mut cache: HashMap<String, usize> = HashMap::new();
    let mut tables: Vec<TruthTable> = Vec::new();
    let mut out = Vec::with_capacity(cells.len());
    for cell in cells {
        let key = serde_json::to_string(&cell.dgp).expect("dgp serializes");
        let idx = match cache.get(&key) {
            Some(&i) => i,
            None => {
                tables.push(compute_truth(&cell.dgp, &taus, config.truth.n_mc, config.truth_seed())?);
                cache.insert(key, tables.len() - 1);
                tables.len() - 1
            }
        };
        out.push(tables[idx].clone());
    }
    Ok(out)
}

/// Runs every (filtered) cell and replicate and aggregates the report.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> SimResult<ExperimentReport> {
    config.validate()?;
    let cells: Vec<Cell> = config
        .cells()
        .into_iter()
        .filter(|c| opts.cell_filter.iter().all(|(k, v)| c.param(k) == Some(v.as_str())))
        .collect();
    if cells.is_empty() {
        return Err(SimError::Spec("the cell filter matches no design cell".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| SimError::Spec(format!("worker pool: {e}")))?;
    let cell_dir = opts.out_dir.as_ref().map(|d| d.join("cells"));
    if let Some(dir) = &cell_dir {
        std::fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    }
    let truths = pool.install(|| truth_tables(config, &cells))?;
    let taus = TauGrid::new(config.taus.clone())?;
    let band_taus = config.inference.band.as_ref().map(|b| b.taus.grid()).transpose()?;

    let mut report = ExperimentReport {
        experiment: config.experiment.clone(),
        seed: config.seed,
        reps: config.reps,
        cells: Vec::new(),
        rows: Vec::new(),
    };
    for (cell, truth) in cells.iter().zip(&truths) {
        let ctx = CellContext {
            config,
            cell,
            truth,
            taus: taus.clone(),
            band_taus: band_taus.clone(),
        };
        let stem = cell.file_stem();
        let fp = fingerprint(config, cell);
        let cached = match (&cell_dir, opts.resume) {
            (Some(dir), true) => load_checkpoint(dir, &stem, &fp)?,
            _ => None,
        };
        let resumed = cached.is_some();
        let records = match cached {
            Some(r) => r,
            None => {
                log::info!("{}: cell {} ({} reps)", config.experiment, cell.id, config.reps);
                let per_rep: Vec<Vec<Record>> =
                    pool.install(|| (0..config.reps).into_par_iter().map(|rep| ctx.run_rep(rep)).collect());
                let records: Vec<Record> = per_rep.into_iter().flatten().collect();
                if let Some(dir) = &cell_dir {
                    write_atomic(&dir.join(format!("{stem}.csv")), &records_to_csv(&records))?;
                    write_atomic(&dir.join(format!("{stem}.fingerprint")), &format!("{fp}\n"))?;
                    truth.write_csv(dir.join(format!("{stem}.truth.csv")))?;
                }
                records
            }
        };
        let theory = match &config.theory {
            Some(t) if cell.dgp.validation.is_constant() => Some(pool.install(|| {
                theory_ratio(&cell.dgp, truth, t.n_mc, derive_seed(config.seed, &[cell.key(), u64::MAX]))
            })?),
            _ => None,
        };
        aggregate_cell(&ctx, &records, theory.as_deref(), &mut report.rows)?;
        report.cells.push(CellSummary {
            id: cell.id.clone(),
            params: cell.params.clone(),
            n: cell.n,
            grid: cell.grid.label(),
            reps: config.reps,
            errors: error_counts(&records),
            resumed,
        });
    }
    if let Some(dir) = &opts.out_dir {
        report.write_csv(dir.join("report.csv"))?;
    }
    Ok(report)
}

fn aggregate_cell(
    ctx: &CellContext<'_>,
    records: &[Record],
    theory: Option<&[f64]>,
    rows: &mut Vec<ReportRow>,
) -> SimResult<()> {
    let cell = ctx.cell;
    let grid_label = cell.grid.label();
    let mut push = |method: &str, tau: Option<f64>, metric: &str, value: f64| {
        rows.push(ReportRow {
            cell: cell.id.clone(),
            n: cell.n,
            grid: grid_label.clone(),
            method: method.to_string(),
            tau,
            metric: metric.to_string(),
            value,
        })
    };
    let s = series(records);
    let get = |method: &str, metric: &str, tau: Option<f64>| s.get(&(method.to_string(), metric.to_string(), tau.map(f64::to_bits)));
    let taus = ctx.taus.levels();
    for &tau in taus {
        push("-", Some(tau), "true_delta", ctx.true_delta(tau));
    }
    let grid = ctx.grid()?;
    let err_taus = ctx.band_taus.as_ref().unwrap_or(&ctx.taus);
    let true_err: Vec<f64> = err_taus.levels().iter().map(|&t| ctx.true_delta(t)).collect();
    let (c1, c0) = (ctx.truth.cdf(Arm::Treated), ctx.truth.cdf(Arm::Control));
    let oge = oracle_grid_error(&|y| c1.cdf(y), &|y| c0.cdf(y), &grid, err_taus, &true_err)?;
    push("-", None, "oracle_grid_error", oge);
    push("-", None, "grid_size", grid.len() as f64);
    let errors = error_counts(records);
    let mut mse: HashMap<Estimator, Vec<f64>> = HashMap::new();
    for &method in &ctx.config.methods {
        let label = method.label();
        let failed: usize = errors.get(label).map(|m| m.values().sum()).unwrap_or(0);
        let ok = ctx.config.reps.saturating_sub(failed);
        push(label, None, "reps_ok", ok as f64);
        push(label, None, "reps_failed", failed as f64);
        let mut method_mse = Vec::new();
        for &tau in taus {
            let Some(est) = get(label, "delta_hat", Some(tau)) else {
                method_mse.push(f64::NAN);
                continue;
            };
            let acc = accuracy(est, ctx.true_delta(tau)).expect("nonempty series");
            push(label, Some(tau), "bias", acc.bias);
            push(label, Some(tau), "variance", acc.variance);
            push(label, Some(tau), "mse", acc.mse);
            push(label, Some(tau), "rmse", acc.rmse);
            method_mse.push(acc.mse);
            for (metric, name) in [("cover", "coverage"), ("ci_length", "ci_length"), ("se", "mean_se"), ("floored", "floored_rate")] {
                if let Some(v) = get(label, metric, Some(tau)).and_then(|v| mean(v)) {
                    push(label, Some(tau), name, v);
                }
            }
        }
        mse.insert(method, method_mse);
        if let Some(v) = get(label, "d_iso", None).and_then(|v| mean(v)) {
            push(label, None, "d_iso", v);
            push(label, None, "sqrt_n_d_iso", (cell.n as f64).sqrt() * v);
        }
        for (metric, name) in [
            ("sup_error", "sup_error"),
            ("uniform_cover", "uniform_coverage"),
            ("band_width", "band_width"),
            ("critical", "mean_critical"),
            ("ess_omega", "ess_omega"),
            ("ess_fraction", "ess_fraction"),
        ] {
            if let Some(v) = get(label, metric, None).and_then(|v| mean(v)) {
                push(label, None, name, v);
            }
        }
    }
    if let (Some(sa), Some(nos)) = (mse.get(&Estimator::Sa), mse.get(&Estimator::Nos)) {
        for (l, &tau) in taus.iter().enumerate() {
            push("NoS", Some(tau), "nos_sa_mse_ratio", nos[l] / sa[l]);
        }
    }
    if let Some(th) = theory {
        for &tau in taus {
            push("NoS", Some(tau), "theory_ratio", th[tau_position(ctx.truth, tau)]);
        }
    }
    Ok(())
}
