//! One-step CDF estimators, their centered influence values, and the
//! point-estimation baselines.
//!
//! All estimators read evaluated nuisances ([`NuisanceValues`]), so the fold
//! bookkeeping lives in the pipeline. Sample means over the target and
//! source samples are ratio-of-sums with the realized `n0`, `n1`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_real, Arm, FoldAssignment, ThresholdGrid, TwoSampleDataset};
use crate::error::{Error, Result};
use crate::oracle::{Atom, DiscreteLaw};
use crate::pipeline::{FittedNuisances, NuisanceValues, Nuisances};

/// Tolerance of the two-route drift check.
pub const DRIFT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SA")]
    Sa,
    #[serde(rename = "NoS")]
    Nos,
    #[serde(rename = "IPW")]
    Ipw,
    Plugin,
    Source,
    Oracle,
    FullOracle,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Sa,
        Method::Nos,
        Method::Ipw,
        Method::Plugin,
        Method::Source,
        Method::Oracle,
        Method::FullOracle,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Sa => "SA",
            Method::Nos => "NoS",
            Method::Ipw => "IPW",
            Method::Plugin => "Plugin",
            Method::Source => "Source",
            Method::Oracle => "Oracle",
            Method::FullOracle => "FullOracle",
        }
    }

    /// Whether the estimator carries influence values (and so inference).
    pub fn has_influence(self) -> bool {
        !matches!(self, Method::Plugin | Method::Source)
    }

    pub fn parse(label: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.label().eq_ignore_ascii_case(label))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A raw CDF estimate on a grid, neither clamped nor monotone.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfEstimate {
    pub method: Method,
    pub arm: Arm,
    pub grid: ThresholdGrid,
    pub raw: Vec<f64>,
    /// `n x J` centered influence values; `None` for Plugin and Source.
    pub influence: Option<DMatrix<f64>>,
}

impl CdfEstimate {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("method,arm,y,psi_hat\n");
        for (y, v) in self.grid.points().iter().zip(&self.raw) {
            out.push_str(&format!("{},{},{},{}\n", self.method, self.arm.index(), fmt_real(*y), fmt_real(*v)));
        }
        out
    }

    /// Long-format influence dump: `i,y,phi`.
    pub fn influence_csv_string(&self) -> Option<String> {
        let phi = self.influence.as_ref()?;
        let mut out = String::from("i,y,phi\n");
        for i in 0..phi.nrows() {
            for (j, y) in self.grid.points().iter().enumerate() {
                out.push_str(&format!("{i},{},{}\n", fmt_real(*y), fmt_real(phi[(i, j)])));
            }
        }
        Some(out)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv_string().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Samples {
    n0: usize,
    n1: usize,
    n: usize,
}

fn samples(ds: &TwoSampleDataset, values: &NuisanceValues) -> Result<Samples> {
    if values.m.nrows() != ds.n() || values.e.len() != ds.n() {
        return Err(Error::invalid("nuisance values do not match the dataset size"));
    }
    let n0 = ds.n_target();
    let n1 = ds.n_source();
    if n0 == 0 || n1 == 0 {
        return Err(Error::invalid(format!("need both samples, got n0 = {n0}, n1 = {n1}")));
    }
    let in_arm = ds
        .observations()
        .iter()
        .filter(|o| o.as_source().is_some_and(|r| r.arm == values.arm))
        .count();
    if in_arm == 0 {
        return Err(Error::EmptyStratum(format!("no source units in arm {}", values.arm.index())));
    }
    Ok(Samples { n0, n1, n: ds.n() })
}

/// Source-unit correction summand of unit `i` at grid index `j`, with the
/// density ratio forced to `omega`.
fn correction(ds: &TwoSampleDataset, v: &NuisanceValues, i: usize, j: usize, omega: f64) -> f64 {
    let Some(rec) = ds.get(i).as_source() else {
        return 0.0;
    };
    if rec.arm != v.arm {
        return 0.0;
    }
    let (m, g, e) = (v.m[(i, j)], v.g[(i, j)], v.e[i]);
    let mut c = omega / e * (m - g);
    if let Some(y) = rec.y {
        let z = if y <= v.grid.points()[j] { 1.0 } else { 0.0 };
        c += omega / (e * v.rho[i]) * (z - m);
    }
    c
}

fn one_step(ds: &TwoSampleDataset, v: &NuisanceValues, method: Method) -> Result<CdfEstimate> {
    let s = samples(ds, v)?;
    let jc = v.grid.len();
    let pi0 = s.n0 as f64 / s.n as f64;
    let pi1 = s.n1 as f64 / s.n as f64;
    let mut raw = vec![0.0; jc];
    let mut phi = DMatrix::<f64>::zeros(s.n, jc);
    for j in 0..jc {
        let (mut target, mut source) = (0.0, 0.0);
        for i in 0..s.n {
            if ds.get(i).is_source() {
                let c = correction(ds, v, i, j, v.omega[i]);
                phi[(i, j)] = c / pi1;
                source += c;
            } else {
                target += v.g[(i, j)];
            }
        }
        let psi = target / s.n0 as f64 + source / s.n1 as f64;
        raw[j] = psi;
        for i in 0..s.n {
            if !ds.get(i).is_source() {
                phi[(i, j)] = (v.g[(i, j)] - psi) / pi0;
            }
        }
    }
    Ok(CdfEstimate {
        method,
        arm: v.arm,
        grid: v.grid.clone(),
        raw,
        influence: Some(phi),
    })
}

/// Surrogate-assisted one-step estimator.
pub fn estimate_sa_values(ds: &TwoSampleDataset, values: &NuisanceValues) -> Result<CdfEstimate> {
    one_step(ds, values, Method::Sa)
}

pub fn estimate_sa(
    ds: &TwoSampleDataset,
    folds: &FoldAssignment,
    nuisances: &dyn Nuisances,
    arm: Arm,
) -> Result<CdfEstimate> {
    estimate_sa_values(ds, &nuisances.values(ds, folds, arm)?)
}

/// The same estimating equation on oracle nuisance values.
pub fn estimate_oracle_values(ds: &TwoSampleDataset, values: &NuisanceValues, full_data: bool) -> Result<CdfEstimate> {
    one_step(ds, values, if full_data { Method::FullOracle } else { Method::Oracle })
}

/// No-surrogate benchmark. `values` must carry `m = g = g^nos` and
/// `rho = rho^0(x)`, so the surrogate term vanishes identically.
pub fn estimate_nos_values(ds: &TwoSampleDataset, values: &NuisanceValues) -> Result<CdfEstimate> {
    if values.m != values.g {
        return Err(Error::invalid("no-surrogate values must have m equal to g"));
    }
    one_step(ds, values, Method::Nos)
}

pub fn estimate_nos(
    ds: &TwoSampleDataset,
    folds: &FoldAssignment,
    nuisances: &FittedNuisances,
    arm: Arm,
) -> Result<CdfEstimate> {
    estimate_nos_values(ds, &nuisances.nos_values(ds, folds, arm)?)
}

/// Validation-only transported IPW. Influence values are source-only:
/// `1(R = 1) / pi1_hat * (summand - psi)`.
pub fn estimate_ipw_values(ds: &TwoSampleDataset, v: &NuisanceValues) -> Result<CdfEstimate> {
    let s = samples(ds, v)?;
    let jc = v.grid.len();
    let pi1 = s.n1 as f64 / s.n as f64;
    let mut raw = vec![0.0; jc];
    let mut phi = DMatrix::<f64>::zeros(s.n, jc);
    for j in 0..jc {
        let t = v.grid.points()[j];
        let mut total = 0.0;
        for i in 0..s.n {
            if let Some(rec) = ds.get(i).as_source() {
                let term = match rec.y {
                    Some(y) if rec.arm == v.arm && y <= t => v.omega[i] / (v.e[i] * v.rho[i]),
                    _ => 0.0,
                };
                phi[(i, j)] = term;
                total += term;
            }
        }
        let psi = total / s.n1 as f64;
        raw[j] = psi;
        for i in 0..s.n {
            if ds.get(i).is_source() {
                phi[(i, j)] = (phi[(i, j)] - psi) / pi1;
            }
        }
    }
    Ok(CdfEstimate {
        method: Method::Ipw,
        arm: v.arm,
        grid: v.grid.clone(),
        raw,
        influence: Some(phi),
    })
}

/// Transported regression plug-in `P_{n,0} g_hat`.
pub fn estimate_plugin_values(ds: &TwoSampleDataset, v: &NuisanceValues) -> Result<CdfEstimate> {
    let s = samples(ds, v)?;
    let raw = (0..v.grid.len())
        .map(|j| {
            (0..s.n)
                .filter(|&i| !ds.get(i).is_source())
                .map(|i| v.g[(i, j)])
                .sum::<f64>()
                / s.n0 as f64
        })
        .collect();
    Ok(CdfEstimate {
        method: Method::Plugin,
        arm: v.arm,
        grid: v.grid.clone(),
        raw,
        influence: None,
    })
}

/// Negative control over the source covariate law: `P_{n,1} g_hat` plus the
/// source corrections with `omega = 1`.
pub fn estimate_source_values(ds: &TwoSampleDataset, v: &NuisanceValues) -> Result<CdfEstimate> {
    let s = samples(ds, v)?;
    let raw = (0..v.grid.len())
        .map(|j| {
            (0..s.n)
                .filter(|&i| ds.get(i).is_source())
                .map(|i| v.g[(i, j)] + correction(ds, v, i, j, 1.0))
                .sum::<f64>()
                / s.n1 as f64
        })
        .collect();
    Ok(CdfEstimate {
        method: Method::Source,
        arm: v.arm,
        grid: v.grid.clone(),
        raw,
        influence: None,
    })
}

/// Uncentered signal `Gamma_i`: `1(R = 0) / pi0_hat * g + 1(R = 1) / pi1_hat *
/// (corrections)`.
pub fn uncentered_signal(ds: &TwoSampleDataset, v: &NuisanceValues) -> Result<DMatrix<f64>> {
    let s = samples(ds, v)?;
    let pi0 = s.n0 as f64 / s.n as f64;
    let pi1 = s.n1 as f64 / s.n as f64;
    Ok(DMatrix::from_fn(s.n, v.grid.len(), |i, j| {
        if ds.get(i).is_source() {
            correction(ds, v, i, j, v.omega[i]) / pi1
        } else {
            v.g[(i, j)] / pi0
        }
    }))
}

/// Candidate nuisances of a finite law at one `(arm, y)`: tables over the
/// covariate and surrogate supports.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateNuisances {
    /// `[x][s]`.
    pub m: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    /// Candidate `e_a(x)` for the arm in question.
    pub e: Vec<f64>,
    /// `[x][s]`.
    pub rho: Vec<Vec<f64>>,
    pub omega: Vec<f64>,
}

impl CandidateNuisances {
    pub fn truth(law: &DiscreteLaw, arm: Arm, y: f64) -> Self {
        let (nx, ns) = (law.nx(), law.ns());
        CandidateNuisances {
            m: (0..nx).map(|x| (0..ns).map(|s| law.m(arm, y, x, s)).collect()).collect(),
            g: (0..nx).map(|x| law.g(arm, y, x)).collect(),
            e: (0..nx).map(|x| law.e(arm, x)).collect(),
            rho: (0..nx).map(|x| (0..ns).map(|s| law.rho_at(arm, x, s)).collect()).collect(),
            omega: (0..nx).map(|x| law.omega(x)).collect(),
        }
    }

    fn check(&self, law: &DiscreteLaw) -> Result<()> {
        let (nx, ns) = (law.nx(), law.ns());
        let shapes_ok = self.m.len() == nx
            && self.rho.len() == nx
            && self.g.len() == nx
            && self.e.len() == nx
            && self.omega.len() == nx
            && self.m.iter().chain(&self.rho).all(|r| r.len() == ns);
        if !shapes_ok {
            return Err(Error::invalid("candidate tables do not match the law's supports"));
        }
        for x in 0..nx {
            if !(self.e[x] > 0.0) {
                return Err(Error::Positivity(format!("candidate e is {} at x[{x}]", self.e[x])));
            }
            for s in 0..ns {
                if !(self.rho[x][s] > 0.0) {
                    return Err(Error::Positivity(format!(
                        "candidate rho is {} at x[{x}], s[{s}]",
                        self.rho[x][s]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The two sides of the drift identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drift {
    /// `Psi(candidate) - psi` by enumerating the three expectations.
    pub direct: f64,
    /// `E_1{(omega - w)(g_bar - g)} + E_1{w H[(1 - r)(m_bar - m)]}`.
    pub identity: f64,
}

/// Both drift routes, without the agreement check.
pub fn drift_parts(candidate: &CandidateNuisances, law: &DiscreteLaw, arm: Arm, y: f64) -> Result<Drift> {
    candidate.check(law)?;
    let psi = law.true_psi(arm, y)?;
    let pi0 = law.pi(0);
    let pi1 = law.pi(1);
    let c = candidate;
    let mut signal = 0.0;
    law.for_each_atom(&[y], |atom, p| match *atom {
        Atom::Target { x } => signal += p / pi0 * c.g[x],
        Atom::Source { x, arm: b, s, y: yv } => {
            if b != arm {
                return;
            }
            let mut v = c.omega[x] / c.e[x] * (c.m[x][s] - c.g[x]);
            if let Some(v_y) = yv {
                let z = if v_y <= y { 1.0 } else { 0.0 };
                v += c.omega[x] / (c.e[x] * c.rho[x][s]) * (z - c.m[x][s]);
            }
            signal += p / pi1 * v;
        }
    });
    let mut identity = 0.0;
    for x in 0..law.nx() {
        let w = c.omega[x] * law.e(arm, x) / c.e[x];
        let mut h = 0.0;
        for s in 0..law.ns() {
            let r = law.rho_at(arm, x, s) / c.rho[x][s];
            h += law.s_prob(arm, x, s) * (1.0 - r) * (c.m[x][s] - law.m(arm, y, x, s));
        }
        identity += law.p1[x] * ((law.omega(x) - w) * (c.g[x] - law.g(arm, y, x)) + w * h);
    }
    Ok(Drift {
        direct: signal - psi,
        identity,
    })
}

/// `Psi(candidate) - psi` after checking that both routes agree to
/// [`DRIFT_TOL`].
pub fn drift_value(candidate: &CandidateNuisances, law: &DiscreteLaw, arm: Arm, y: f64) -> Result<f64> {
    let d = drift_parts(candidate, law, arm, y)?;
    let diff = (d.direct - d.identity).abs();
    if diff > DRIFT_TOL {
        return Err(Error::IdentityMismatch {
            what: "drift identity".into(),
            difference: diff,
        });
    }
    Ok(d.direct)
}
