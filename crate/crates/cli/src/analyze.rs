//! `tqte analyze`: the estimation pipeline on a user dataset.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tqte::dataset::fmt_real;
use tqte::distribution::{GridChoice, MonotoneCdf};
use tqte::inference::{band_csv_string, ess_omega, multiplier_band, qte_pointwise, BandwidthRule, MultiplierKind};
use tqte::onestep::{
    estimate_ipw_values, estimate_nos_values, estimate_plugin_values, estimate_sa_values, estimate_source_values,
    CdfEstimate, Method,
};
use tqte::pipeline::{fit_nuisances, FittedNuisances, NuisanceConfig, Nuisances, OmegaSpec};
use tqte::seed::derive_seed;
use tqte::{Arm, FoldAssignment, TauGrid, TwoSampleDataset};

use crate::svg::{Band, Chart, Series};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveConfig {
    pub from: f64,
    pub to: f64,
    pub step: f64,
    /// Multiplier-bootstrap draws for the simultaneous band; `0` skips it.
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub multiplier: MultiplierKind,
}

fn default_draws() -> usize {
    1000
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig {
            from: 0.1,
            to: 0.9,
            step: 0.01,
            draws: default_draws(),
            multiplier: MultiplierKind::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// CSV path, relative to the config file.
    pub dataset: PathBuf,
    pub taus: Vec<f64>,
    #[serde(default = "default_grid")]
    pub grid: GridChoice,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub nuisance: NuisanceConfig,
    #[serde(default)]
    pub bandwidth: BandwidthRule,
    #[serde(default)]
    pub curve: CurveConfig,
    /// Write covariate balance before and after density-ratio weighting.
    #[serde(default)]
    pub balance: bool,
}

fn default_grid() -> GridChoice {
    GridChoice::Fixed(101)
}

fn default_alpha() -> f64 {
    0.05
}

fn default_folds() -> usize {
    5
}

fn default_methods() -> Vec<Method> {
    vec![Method::Sa]
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        TauGrid::new(self.taus.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        TauGrid::range(self.curve.from, self.curve.to, self.curve.step).map_err(|e| CliError::Config(format!("curve: {e}")))?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.folds == 0 {
            return bad("folds must be at least 1".into());
        }
        if self.curve.draws != 0 && self.curve.draws < 100 {
            return bad("curve.draws must be 0 or at least 100".into());
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        for m in &self.methods {
            if matches!(m, Method::Oracle | Method::FullOracle) {
                return bad(format!("method {m} needs the true law and is only available in simulate"));
            }
        }
        if self.methods.contains(&Method::Nos) && self.nuisance.nos.is_none() {
            return bad("method NoS needs a `nuisance.nos` learner".into());
        }
        if matches!(self.nuisance.omega, OmegaSpec::Known) {
            return bad("nuisance.omega `known` is unavailable for observed data".into());
        }
        self.nuisance.validate().map_err(|e| CliError::Config(e.to_string()))
    }
}

pub struct AnalyzeOptions {
    pub out: PathBuf,
    pub svg: bool,
    pub grid: Option<GridChoice>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub bootstrap: Option<usize>,
}

struct MethodResult {
    method: Method,
    est: [CdfEstimate; 2],
    cdf: [MonotoneCdf; 2],
}

fn estimate(method: Method, ds: &TwoSampleDataset, folds: &FoldAssignment, fit: &FittedNuisances) -> tqte::Result<[CdfEstimate; 2]> {
    let one = |arm: Arm| -> tqte::Result<CdfEstimate> {
        match method {
            Method::Nos => estimate_nos_values(ds, &fit.nos_values(ds, folds, arm)?),
            _ => {
                let v = fit.values(ds, folds, arm)?;
                match method {
                    Method::Sa => estimate_sa_values(ds, &v),
                    Method::Ipw => estimate_ipw_values(ds, &v),
                    Method::Plugin => estimate_plugin_values(ds, &v),
                    Method::Source => estimate_source_values(ds, &v),
                    _ => unreachable!("rejected during validation"),
                }
            }
        }
    };
    Ok([one(Arm::Control)?, one(Arm::Treated)?])
}

/// Standardized mean differences of each covariate, source versus target,
/// unweighted and with source units weighted by `omega_hat`.
pub fn balance_table(ds: &TwoSampleDataset, omega: &[f64]) -> Vec<(String, f64, f64)> {
    let obs = ds.observations();
    (0..ds.p())
        .map(|k| {
            let moments = |w: &dyn Fn(usize) -> f64, source: bool| {
                let mut sw = 0.0;
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for (i, o) in obs.iter().enumerate().filter(|(_, o)| o.is_source() == source) {
                    let (wi, v) = (w(i), o.x()[k]);
                    sw += wi;
                    s1 += wi * v;
                    s2 += wi * v * v;
                }
                let m = s1 / sw;
                (m, (s2 / sw - m * m).max(0.0))
            };
            let one = |_: usize| 1.0;
            let (mt, vt) = moments(&one, false);
            let (ms, vs) = moments(&one, true);
            let (mw, _) = moments(&|i| omega[i], true);
            let pooled = ((vs + vt) / 2.0).sqrt();
            let smd = |m: f64| if pooled > 0.0 { (m - mt) / pooled } else { 0.0 };
            (format!("x{}", k + 1), smd(ms), smd(mw))
        })
        .collect()
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_real).unwrap_or_default()
}

pub fn run(cfg: &AnalysisConfig, base_dir: &Path, opts: &AnalyzeOptions) -> Result<String, CliError> {
    let mut cfg = cfg.clone();
    if let Some(g) = opts.grid {
        cfg.grid = g;
    }
    if let Some(a) = opts.alpha {
        cfg.alpha = a;
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(b) = opts.bootstrap {
        cfg.curve.draws = b;
    }
    cfg.validate()?;
    let path = base_dir.join(&cfg.dataset);
    let ds = TwoSampleDataset::read_csv(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let ys = ds.validated_outcomes();
    if ys.is_empty() {
        return Err(CliError::Runtime("no validated outcomes: every source unit has M = 0".into()));
    }
    let (lo, hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    if !(hi > lo) {
        return Err(CliError::Runtime("validated outcomes are all equal; a threshold grid needs a nondegenerate range".into()));
    }
    let grid = cfg.grid.build(ds.n(), lo, hi).map_err(|e| CliError::Runtime(e.to_string()))?;
    let folds = FoldAssignment::for_dataset(&ds, cfg.folds, derive_seed(cfg.seed, &[1])).map_err(runtime_with_guidance)?;
    let mut ncfg = cfg.nuisance.clone();
    if !cfg.methods.contains(&Method::Nos) {
        ncfg.nos = None;
    }
    let fit = fit_nuisances(&ds, &folds, &grid, &ncfg, derive_seed(cfg.seed, &[2])).map_err(runtime_with_guidance)?;
    let mut results = Vec::new();
    for &m in &cfg.methods {
        let est = estimate(m, &ds, &folds, &fit).map_err(runtime_with_guidance)?;
        let cdf = [
            MonotoneCdf::project(grid.clone(), &est[0].raw).map_err(|e| CliError::Runtime(e.to_string()))?,
            MonotoneCdf::project(grid.clone(), &est[1].raw).map_err(|e| CliError::Runtime(e.to_string()))?,
        ];
        results.push(MethodResult { method: m, est, cdf });
    }
    let taus = TauGrid::new(cfg.taus.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let rt = |e: tqte::Error| CliError::Runtime(e.to_string());

    // Per-tau table.
    let mut rows: Vec<(Method, f64, f64, Option<(f64, f64, f64)>)> = Vec::new();
    for r in &results {
        if r.method.has_influence() {
            let q = qte_pointwise(&r.est[1], &r.est[0], &r.cdf[1], &r.cdf[0], &taus, cfg.alpha, &cfg.bandwidth).map_err(rt)?;
            for l in 0..q.taus.len() {
                rows.push((r.method, q.taus[l], q.delta[l], Some((q.se[l], q.lo[l], q.hi[l]))));
            }
        } else {
            for &t in taus.levels() {
                rows.push((r.method, t, r.cdf[1].quantile(t).value - r.cdf[0].quantile(t).value, None));
            }
        }
    }
    let sa_len = |tau: f64| {
        rows.iter()
            .find(|(m, t, _, _)| *m == Method::Sa && *t == tau)
            .and_then(|r| r.3.map(|(_, lo, hi)| hi - lo))
    };
    let mut table = String::from("method,tau,delta_hat,se,lo,hi,ci_length,ci_length_ratio\n");
    let mut pretty = format!("{:<8} {:>6} {:>10} {:>9} {:>10} {:>10} {:>9}\n", "method", "tau", "delta", "se", "lo", "hi", "len/SA");
    for (m, t, d, inf) in &rows {
        let len = inf.map(|(_, lo, hi)| hi - lo);
        let ratio = match (len, sa_len(*t)) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b),
            _ => None,
        };
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{}",
            m,
            fmt_real(*t),
            fmt_real(*d),
            opt(inf.map(|x| x.0)),
            opt(inf.map(|x| x.1)),
            opt(inf.map(|x| x.2)),
            opt(len),
            opt(ratio)
        );
        let f = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            pretty,
            "{:<8} {:>6.2} {:>10.4} {:>9} {:>10} {:>10} {:>9}",
            m.label(),
            t,
            d,
            f(inf.map(|x| x.0)),
            f(inf.map(|x| x.1)),
            f(inf.map(|x| x.2)),
            f(ratio)
        );
    }
    std::fs::create_dir_all(&opts.out).map_err(|e| CliError::Runtime(format!("{}: {e}", opts.out.display())))?;
    write(&opts.out.join("qte_table.csv"), &table)?;

    // Projected CDFs.
    let mut cdf_csv = String::from("method,arm,y,psi_raw,psi_monotone\n");
    for r in &results {
        for arm in Arm::BOTH {
            let (e, c) = (&r.est[arm.index()], &r.cdf[arm.index()]);
            for (j, y) in grid.points().iter().enumerate() {
                let _ = writeln!(cdf_csv, "{},{},{},{},{}", r.method, arm.index(), fmt_real(*y), fmt_real(e.raw[j]), fmt_real(c.values()[j]));
            }
        }
    }
    write(&opts.out.join("cdf.csv"), &cdf_csv)?;

    // Diagnostics.
    let omega = fit.values(&ds, &folds, Arm::Treated).map_err(rt)?.omega;
    let src: Vec<f64> = (0..ds.n()).filter(|&i| ds.get(i).is_source()).map(|i| omega[i]).collect();
    let ess = ess_omega(&src).map_err(rt)?;
    let n1 = ds.n_source() as f64;
    let validated = ds.n_validated(Arm::Treated) + ds.n_validated(Arm::Control);
    let mut diag: Vec<(&str, f64)> = vec![
        ("n", ds.n() as f64),
        ("n_target", ds.n_target() as f64),
        ("n_source", n1),
        ("n_validated_control", ds.n_validated(Arm::Control) as f64),
        ("n_validated_treated", ds.n_validated(Arm::Treated) as f64),
        ("validation_rate", validated as f64 / n1),
        ("ess_omega", ess),
        ("ess_fraction", ess / n1),
        ("grid_size", grid.len() as f64),
    ];

    // QTE curve with bands from the first influence-bearing method.
    let mut curve_csv = None;
    if let Some(r) = results.iter().find(|r| r.method.has_influence()) {
        let ct = TauGrid::range(cfg.curve.from, cfg.curve.to, cfg.curve.step).map_err(rt)?;
        let q = qte_pointwise(&r.est[1], &r.est[0], &r.cdf[1], &r.cdf[0], &ct, cfg.alpha, &cfg.bandwidth).map_err(rt)?;
        diag.push(("d_iso_control", r.cdf[0].d_iso()));
        diag.push(("d_iso_treated", r.cdf[1].d_iso()));
        let band = if cfg.curve.draws > 0 {
            let b = multiplier_band(&q, cfg.curve.draws, cfg.alpha, derive_seed(cfg.seed, &[3]), cfg.curve.multiplier).map_err(rt)?;
            diag.push(("band_critical", b.critical));
            Some(b)
        } else {
            None
        };
        let text = match &band {
            Some(b) => band_csv_string(&q, b),
            None => {
                let mut s = String::from("tau,delta_hat,se,lo_pointwise,hi_pointwise,density_floor_flag\n");
                for l in 0..q.taus.len() {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{}",
                        fmt_real(q.taus[l]),
                        fmt_real(q.delta[l]),
                        fmt_real(q.se[l]),
                        fmt_real(q.lo[l]),
                        fmt_real(q.hi[l]),
                        u8::from(q.floored(l))
                    );
                }
                s
            }
        };
        write(&opts.out.join("qte_curve.csv"), &text)?;
        curve_csv = Some(());
        if opts.svg {
            let mut bands = Vec::new();
            if let Some(b) = &band {
                bands.push(Band {
                    name: format!("simultaneous {:.0}%", 100.0 * (1.0 - cfg.alpha)),
                    x: q.taus.clone(),
                    lo: b.lo.clone(),
                    hi: b.hi.clone(),
                    opacity: 0.15,
                });
            }
            bands.push(Band {
                name: format!("pointwise {:.0}%", 100.0 * (1.0 - cfg.alpha)),
                x: q.taus.clone(),
                lo: q.lo.clone(),
                hi: q.hi.clone(),
                opacity: 0.3,
            });
            let chart = Chart {
                title: format!("{} quantile treatment effect", r.method.label()),
                x_label: "tau".into(),
                y_label: "delta(tau)".into(),
                series: vec![Series {
                    name: r.method.label().into(),
                    points: q.taus.iter().copied().zip(q.delta.iter().copied()).collect(),
                }],
                bands,
                reference: Some(0.0),
            };
            write(&opts.out.join("qte_curve.svg"), &chart.render())?;
        }
    }
    let _ = curve_csv;
    let mut diag_csv = String::from("metric,value\n");
    for (k, v) in &diag {
        let _ = writeln!(diag_csv, "{k},{}", fmt_real(*v));
    }
    write(&opts.out.join("diagnostics.csv"), &diag_csv)?;

    if cfg.balance {
        let mut s = String::from("covariate,smd_unweighted,smd_weighted\n");
        for (name, u, w) in balance_table(&ds, &omega) {
            let _ = writeln!(s, "{name},{},{}", fmt_real(u), fmt_real(w));
        }
        write(&opts.out.join("balance.csv"), &s)?;
    }
    let _ = writeln!(pretty, "\nESS_omega {:.1} ({:.3} of {} source units); validation rate {:.3}", ess, ess / n1, n1, validated as f64 / n1);
    Ok(pretty)
}

fn runtime_with_guidance(e: tqte::Error) -> CliError {
    match e {
        tqte::Error::Stratification { .. } | tqte::Error::EmptyStratum(_) => CliError::Runtime(format!(
            "{e}\nhint: lower `folds`, or supply more units in every (sample, arm, validated) stratum"
        )),
        other => CliError::Runtime(other.to_string()),
    }
}
