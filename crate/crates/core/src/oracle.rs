//! Exact finite-support observed-data laws.
//!
//! A [`DiscreteLaw`] fixes `pi_r`, finite covariate and surrogate supports,
//! the treatment and validation mechanisms, and one outcome law per
//! `(a, x, s)` cell. Expectations of functions of the observed data are
//! computed by enumerating the outcome space exactly, which makes the law a
//! brute-force oracle for identification, influence-function and
//! efficiency-gain identities.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal as NormalDist};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::dataset::{Arm, Observation, TwoSampleDataset};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Tolerance for identities that hold exactly in exact arithmetic.
pub const EXACT_TOL: f64 = 1e-12;

/// Conditional law of `Y` given `(A, X, S)` in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeLaw {
    Finite { support: Vec<f64>, pmf: Vec<f64> },
    Gaussian { mean: f64, sd: f64 },
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

impl OutcomeLaw {
    pub fn cdf(&self, y: f64) -> f64 {
        match self {
            OutcomeLaw::Finite { support, pmf } => support
                .iter()
                .zip(pmf)
                .filter(|(v, _)| **v <= y)
                .map(|(_, p)| p)
                .sum(),
            OutcomeLaw::Gaussian { mean, sd } => std_normal().cdf((y - mean) / sd),
        }
    }

    pub fn density(&self, y: f64) -> Option<f64> {
        match self {
            OutcomeLaw::Finite { .. } => None,
            OutcomeLaw::Gaussian { mean, sd } => Some(std_normal().pdf((y - mean) / sd) / sd),
        }
    }

    /// Atoms `(representative, probability)` such that `1(Y <= t)` is
    /// constant on each atom for every `t` in `thresholds` (sorted, unique).
    /// For continuous laws an atom is the interval `(t_{k-1}, t_k]`,
    /// represented by `t_k`; the last interval is represented by `+inf`.
    pub fn atoms(&self, thresholds: &[f64]) -> Vec<(f64, f64)> {
        match self {
            OutcomeLaw::Finite { support, pmf } => support.iter().copied().zip(pmf.iter().copied()).collect(),
            OutcomeLaw::Gaussian { .. } => {
                let mut out = Vec::with_capacity(thresholds.len() + 1);
                let mut prev = 0.0;
                for &t in thresholds {
                    let c = self.cdf(t);
                    out.push((t, c - prev));
                    prev = c;
                }
                out.push((f64::INFINITY, 1.0 - prev));
                out
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            OutcomeLaw::Finite { support, pmf } => support[draw_index(rng, pmf)],
            OutcomeLaw::Gaussian { mean, sd } => {
                let z: f64 = NormalDist::new(0.0, 1.0).expect("normal").sample(rng);
                mean + sd * z
            }
        }
    }
}

fn draw_index<R: Rng + ?Sized>(rng: &mut R, pmf: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    pmf.len() - 1
}

/// One point of the enumerated observed-data space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Atom {
    Target { x: usize },
    Source {
        x: usize,
        arm: Arm,
        s: usize,
        /// `Some(y)` iff validated; `y` is the atom representative.
        y: Option<f64>,
    },
}

/// Exact finite-support observed-data law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteLaw {
    pub pi0: f64,
    pub x_support: Vec<Vec<f64>>,
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
    /// `P(A = 1 | X = x, R = 1)`.
    pub e1: Vec<f64>,
    pub s_support: Vec<Vec<f64>>,
    /// `P(S = s | A = a, X = x, R = 1)` indexed `[a][x][s]`.
    pub s_pmf: [Vec<Vec<f64>>; 2],
    /// `P(M = 1 | A = a, X = x, S = s, R = 1)` indexed `[a][x][s]`.
    pub rho: [Vec<Vec<f64>>; 2],
    /// Law of `Y` given `(A = a, X = x, S = s)` indexed `[a][x][s]`.
    pub outcome: [Vec<Vec<OutcomeLaw>>; 2],
}

/// Covariances of the three influence-function components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EifComponents {
    /// Rows/columns: target, surrogate-process, validation-outcome.
    pub cov: [[f64; 3]; 3],
    pub variance: f64,
}

/// Options for [`DiscreteLaw::random`].
#[derive(Debug, Clone, PartialEq)]
pub struct RandomLawOptions {
    pub nx: usize,
    pub ns: usize,
    /// `Some(k)`: finite outcome support of size `k`; `None`: Gaussian cells.
    pub ny: Option<usize>,
    /// Validation depends on `x` only.
    pub rho_x: bool,
    /// Outcome law does not depend on `s`.
    pub uninformative_surrogate: bool,
    /// `rho = 1` everywhere.
    pub full_validation: bool,
    /// Propensities are drawn from `U(eps, 1 - eps)`.
    pub eps: f64,
}

impl Default for RandomLawOptions {
    fn default() -> Self {
        RandomLawOptions {
            nx: 4,
            ns: 3,
            ny: Some(5),
            rho_x: false,
            uninformative_surrogate: false,
            full_validation: false,
            eps: 0.1,
        }
    }
}

fn dirichlet_flat<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Half Dirichlet, half uniform: keeps every mass above `0.5 / k`.
fn bounded_pmf<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let d = dirichlet_flat(rng, k);
    let mut p: Vec<f64> = d.iter().map(|v| 0.5 * v + 0.5 / k as f64).collect();
    renormalize(&mut p);
    p
}

fn renormalize(p: &mut [f64]) {
    let total: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= total;
    }
}

impl DiscreteLaw {
    /// Checks the pmf, positivity and shape invariants.
    pub fn validate(&self) -> Result<()> {
        let nx = self.x_support.len();
        let ns = self.s_support.len();
        if nx == 0 || ns == 0 {
            return Err(Error::invalid("covariate and surrogate supports must be nonempty"));
        }
        if !(self.pi0 > 0.0 && self.pi0 < 1.0) {
            return Err(Error::Positivity(format!("pi0 = {} must lie in (0, 1)", self.pi0)));
        }
        let pmf_ok = |p: &[f64]| (p.iter().sum::<f64>() - 1.0).abs() <= EXACT_TOL && p.iter().all(|&v| v >= 0.0);
        if self.p0.len() != nx || self.p1.len() != nx || self.e1.len() != nx {
            return Err(Error::invalid("covariate pmfs and propensities must match the covariate support"));
        }
        if !pmf_ok(&self.p0) || !pmf_ok(&self.p1) {
            return Err(Error::invalid("covariate pmfs must sum to one"));
        }
        for x in 0..nx {
            if self.p1[x] <= 0.0 {
                return Err(Error::Positivity(format!("source covariate mass at x[{x}] is zero")));
            }
            if !(self.e1[x] > 0.0 && self.e1[x] < 1.0) {
                return Err(Error::Positivity(format!("propensity at x[{x}] must lie in (0, 1)")));
            }
        }
        for a in 0..2 {
            if self.s_pmf[a].len() != nx || self.rho[a].len() != nx || self.outcome[a].len() != nx {
                return Err(Error::invalid("per-arm tables must match the covariate support"));
            }
            for x in 0..nx {
                if self.s_pmf[a][x].len() != ns || self.rho[a][x].len() != ns || self.outcome[a][x].len() != ns {
                    return Err(Error::invalid("per-cell tables must match the surrogate support"));
                }
                if !pmf_ok(&self.s_pmf[a][x]) {
                    return Err(Error::invalid(format!("surrogate pmf for a={a}, x[{x}] must sum to one")));
                }
                for s in 0..ns {
                    let r = self.rho[a][x][s];
                    if !(r > 0.0 && r <= 1.0) {
                        return Err(Error::Positivity(format!("rho for a={a}, x[{x}], s[{s}] must lie in (0, 1]")));
                    }
                    match &self.outcome[a][x][s] {
                        OutcomeLaw::Finite { support, pmf } => {
                            if support.len() != pmf.len() || !pmf_ok(pmf) {
                                return Err(Error::invalid("finite outcome pmf must sum to one"));
                            }
                        }
                        OutcomeLaw::Gaussian { sd, .. } => {
                            if !(*sd > 0.0) {
                                return Err(Error::invalid("Gaussian outcome sd must be positive"));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.x_support.len()
    }

    pub fn ns(&self) -> usize {
        self.s_support.len()
    }

    pub fn pi(&self, r: u8) -> f64 {
        if r == 0 {
            self.pi0
        } else {
            1.0 - self.pi0
        }
    }

    pub fn omega(&self, x: usize) -> f64 {
        self.p0[x] / self.p1[x]
    }

    pub fn e(&self, arm: Arm, x: usize) -> f64 {
        match arm {
            Arm::Treated => self.e1[x],
            Arm::Control => 1.0 - self.e1[x],
        }
    }

    pub fn s_prob(&self, arm: Arm, x: usize, s: usize) -> f64 {
        self.s_pmf[arm.index()][x][s]
    }

    pub fn rho_at(&self, arm: Arm, x: usize, s: usize) -> f64 {
        self.rho[arm.index()][x][s]
    }

    pub fn m(&self, arm: Arm, y: f64, x: usize, s: usize) -> f64 {
        self.outcome[arm.index()][x][s].cdf(y)
    }

    /// `g_a(y, x) = E{m_a(y, x, S) | R = 1, A = a, X = x}`.
    pub fn g(&self, arm: Arm, y: f64, x: usize) -> f64 {
        (0..self.ns()).map(|s| self.s_prob(arm, x, s) * self.m(arm, y, x, s)).sum()
    }

    /// Source-population CDF `E_1{g_a(y, X)}`.
    pub fn source_psi(&self, arm: Arm, y: f64) -> f64 {
        (0..self.nx()).map(|x| self.p1[x] * self.g(arm, y, x)).sum()
    }

    /// `psi_a(y) = E_0{g_a(y, X)}`, checked against `E_1{omega g_a}`.
    pub fn true_psi(&self, arm: Arm, y: f64) -> Result<f64> {
        let target: f64 = (0..self.nx()).map(|x| self.p0[x] * self.g(arm, y, x)).sum();
        let source: f64 = (0..self.nx()).map(|x| self.p1[x] * self.omega(x) * self.g(arm, y, x)).sum();
        let diff = (target - source).abs();
        if diff > EXACT_TOL {
            return Err(Error::IdentityMismatch {
                what: "target and omega-weighted source representations of psi".into(),
                difference: diff,
            });
        }
        Ok(target)
    }

    /// Calls `f(atom, probability)` for every atom of the observed-data law.
    /// `thresholds` must contain every `y` at which `1(Y <= y)` is evaluated.
    pub fn for_each_atom(&self, thresholds: &[f64], mut f: impl FnMut(&Atom, f64)) {
        let mut ts: Vec<f64> = thresholds.to_vec();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let pi1 = 1.0 - self.pi0;
        for x in 0..self.nx() {
            f(&Atom::Target { x }, self.pi0 * self.p0[x]);
        }
        for x in 0..self.nx() {
            for arm in Arm::BOTH {
                let base = pi1 * self.p1[x] * self.e(arm, x);
                for s in 0..self.ns() {
                    let ps = base * self.s_prob(arm, x, s);
                    if ps == 0.0 {
                        continue;
                    }
                    let r = self.rho_at(arm, x, s);
                    if r < 1.0 {
                        f(&Atom::Source { x, arm, s, y: None }, ps * (1.0 - r));
                    }
                    for (yv, py) in self.outcome[arm.index()][x][s].atoms(&ts) {
                        if py > 0.0 {
                            f(&Atom::Source { x, arm, s, y: Some(yv) }, ps * r * py);
                        }
                    }
                }
            }
        }
    }

    /// The three lines of the efficient influence function at an atom.
    pub fn eif_parts(&self, atom: &Atom, arm: Arm, y: f64, psi: f64) -> [f64; 3] {
        let pi0 = self.pi0;
        let pi1 = 1.0 - pi0;
        match *atom {
            Atom::Target { x } => [(self.g(arm, y, x) - psi) / pi0, 0.0, 0.0],
            Atom::Source { x, arm: b, s, y: yv } => {
                if b != arm {
                    return [0.0; 3];
                }
                let w = self.omega(x) / (pi1 * self.e(arm, x));
                let m = self.m(arm, y, x, s);
                let surrogate = w * (m - self.g(arm, y, x));
                let validation = match yv {
                    Some(v) => {
                        let z = if v <= y { 1.0 } else { 0.0 };
                        w / self.rho_at(arm, x, s) * (z - m)
                    }
                    None => 0.0,
                };
                [0.0, surrogate, validation]
            }
        }
    }

    pub fn eif_value(&self, atom: &Atom, arm: Arm, y: f64, psi: f64) -> f64 {
        self.eif_parts(atom, arm, y, psi).iter().sum()
    }

    /// `(E phi, E phi^2)`; the mean is asserted to vanish.
    pub fn eif_moments(&self, arm: Arm, y: f64) -> Result<(f64, f64)> {
        let psi = self.true_psi(arm, y)?;
        let (mut mean, mut second) = (0.0, 0.0);
        self.for_each_atom(&[y], |atom, p| {
            let v = self.eif_value(atom, arm, y, psi);
            mean += p * v;
            second += p * v * v;
        });
        if mean.abs() > EXACT_TOL {
            return Err(Error::IdentityMismatch {
                what: "influence function mean".into(),
                difference: mean.abs(),
            });
        }
        Ok((mean, second - mean * mean))
    }

    /// Enumerated covariance of the target, surrogate and validation lines;
    /// off-diagonals are asserted to vanish.
    pub fn three_orthogonal_components(&self, arm: Arm, y: f64) -> Result<EifComponents> {
        let psi = self.true_psi(arm, y)?;
        let mut mean = [0.0; 3];
        let mut cross = [[0.0; 3]; 3];
        let mut second = 0.0;
        self.for_each_atom(&[y], |atom, p| {
            let c = self.eif_parts(atom, arm, y, psi);
            let total: f64 = c.iter().sum();
            second += p * total * total;
            for i in 0..3 {
                mean[i] += p * c[i];
                for j in 0..3 {
                    cross[i][j] += p * c[i] * c[j];
                }
            }
        });
        let mut cov = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] = cross[i][j] - mean[i] * mean[j];
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                if i != j && cov[i][j].abs() > EXACT_TOL {
                    return Err(Error::IdentityMismatch {
                        what: format!("covariance of influence components {i} and {j}"),
                        difference: cov[i][j].abs(),
                    });
                }
            }
        }
        let total_mean: f64 = mean.iter().sum();
        Ok(EifComponents {
            cov,
            variance: second - total_mean * total_mean,
        })
    }

    /// `rho^0_a(x)` tables when validation ignores the surrogate; otherwise an
    /// error with an `(x, s, s')` witness.
    pub fn rho_x(&self) -> Result<[Vec<f64>; 2]> {
        let mut out = [vec![0.0; self.nx()], vec![0.0; self.nx()]];
        for arm in Arm::BOTH {
            for x in 0..self.nx() {
                let support: Vec<usize> = (0..self.ns()).filter(|&s| self.s_prob(arm, x, s) > 0.0).collect();
                let first = support[0];
                for &s in &support[1..] {
                    let diff = (self.rho_at(arm, x, s) - self.rho_at(arm, x, first)).abs();
                    if diff > EXACT_TOL {
                        return Err(Error::Assumption(format!(
                            "validation depends on the surrogate: arm {}, x[{x}], rho(s[{first}]) = {} but rho(s[{s}]) = {}",
                            arm.index(),
                            self.rho_at(arm, x, first),
                            self.rho_at(arm, x, s)
                        )));
                    }
                }
                out[arm.index()][x] = self.rho_at(arm, x, first);
            }
        }
        Ok(out)
    }

    /// Influence function of the no-surrogate benchmark at an atom.
    pub fn nos_eif_value(&self, atom: &Atom, arm: Arm, y: f64, psi: f64, rho0: &[f64]) -> f64 {
        let pi1 = 1.0 - self.pi0;
        match *atom {
            Atom::Target { x } => (self.g(arm, y, x) - psi) / self.pi0,
            Atom::Source { x, arm: b, y: yv, .. } => {
                if b != arm {
                    return 0.0;
                }
                match yv {
                    Some(v) => {
                        let z = if v <= y { 1.0 } else { 0.0 };
                        self.omega(x) / (pi1 * self.e(arm, x) * rho0[x]) * (z - self.g(arm, y, x))
                    }
                    None => 0.0,
                }
            }
        }
    }

    /// `V_{a,0}(y)` by enumeration (requires surrogate-ignorable labeling).
    pub fn nos_variance(&self, arm: Arm, y: f64) -> Result<f64> {
        let rho0 = self.rho_x()?;
        let psi = self.true_psi(arm, y)?;
        let (mut mean, mut second) = (0.0, 0.0);
        self.for_each_atom(&[y], |atom, p| {
            let v = self.nos_eif_value(atom, arm, y, psi, &rho0[arm.index()]);
            mean += p * v;
            second += p * v * v;
        });
        if mean.abs() > EXACT_TOL {
            return Err(Error::IdentityMismatch {
                what: "no-surrogate influence function mean".into(),
                difference: mean.abs(),
            });
        }
        Ok(second - mean * mean)
    }

    /// Closed-form `V_{a,0}(y) - V_a(y)`:
    /// `(1/pi1) E_1[omega^2 / e_a * (1 - rho0) / rho0 * Var(m | X)]`.
    pub fn efficiency_gain_closed_form(&self, arm: Arm, y: f64) -> Result<f64> {
        let rho0 = self.rho_x()?;
        let pi1 = 1.0 - self.pi0;
        let mut total = 0.0;
        for x in 0..self.nx() {
            let g = self.g(arm, y, x);
            let var: f64 = (0..self.ns())
                .map(|s| self.s_prob(arm, x, s) * (self.m(arm, y, x, s) - g).powi(2))
                .sum();
            let r = rho0[arm.index()][x];
            total += self.p1[x] * self.omega(x).powi(2) / self.e(arm, x) * (1.0 - r) / r * var;
        }
        Ok(total / pi1)
    }

    /// Efficiency gain from observing the surrogate, computed in closed form
    /// and by enumeration; the two must agree to `1e-10`.
    pub fn efficiency_gain(&self, arm: Arm, y: f64) -> Result<f64> {
        let closed = self.efficiency_gain_closed_form(arm, y)?;
        let (_, v) = self.eif_moments(arm, y)?;
        let v0 = self.nos_variance(arm, y)?;
        let diff = (closed - (v0 - v)).abs();
        if diff > 1e-10 {
            return Err(Error::IdentityMismatch {
                what: "closed-form efficiency gain versus enumerated variance difference".into(),
                difference: diff,
            });
        }
        Ok(closed)
    }

    fn is_continuous(&self) -> bool {
        self.outcome
            .iter()
            .flatten()
            .flatten()
            .all(|o| matches!(o, OutcomeLaw::Gaussian { .. }))
    }

    /// Target density `f_a(y)`; defined for Gaussian-cell laws only.
    pub fn density(&self, arm: Arm, y: f64) -> Result<f64> {
        let mut total = 0.0;
        for x in 0..self.nx() {
            for s in 0..self.ns() {
                let d = self.outcome[arm.index()][x][s]
                    .density(y)
                    .ok_or_else(|| Error::invalid("outcome density requested for a finite-support law"))?;
                total += self.p0[x] * self.s_prob(arm, x, s) * d;
            }
        }
        Ok(total)
    }

    /// `q_a(tau) = inf{y : psi_a(y) >= tau}`.
    pub fn quantile(&self, arm: Arm, tau: f64) -> Result<f64> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::invalid(format!("tau = {tau} must lie in (0, 1)")));
        }
        if !self.is_continuous() {
            let mut support: Vec<f64> = self
                .outcome
                .iter()
                .flatten()
                .flatten()
                .flat_map(|o| match o {
                    OutcomeLaw::Finite { support, .. } => support.clone(),
                    OutcomeLaw::Gaussian { .. } => Vec::new(),
                })
                .collect();
            support.sort_by(f64::total_cmp);
            support.dedup();
            for &v in &support {
                if self.true_psi(arm, v)? >= tau {
                    return Ok(v);
                }
            }
            return Ok(*support.last().expect("nonempty support"));
        }
        let psi = |y: f64| -> f64 { (0..self.nx()).map(|x| self.p0[x] * self.g(arm, y, x)).sum() };
        let (mut lo, mut hi) = (-1.0, 1.0);
        while psi(lo) >= tau {
            lo = 2.0 * lo - 1.0;
        }
        while psi(hi) < tau {
            hi = 2.0 * hi + 1.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if psi(mid) < tau {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-13 * (1.0 + hi.abs()) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// `Delta(tau) = q_1(tau) - q_0(tau)`.
    pub fn qte(&self, tau: f64) -> Result<f64> {
        Ok(self.quantile(Arm::Treated, tau)? - self.quantile(Arm::Control, tau)?)
    }

    /// `E{phi_{Delta,tau}^2}` by enumeration.
    pub fn qte_if_variance(&self, tau: f64) -> Result<f64> {
        let q1 = self.quantile(Arm::Treated, tau)?;
        let q0 = self.quantile(Arm::Control, tau)?;
        let f1 = self.density(Arm::Treated, q1)?;
        let f0 = self.density(Arm::Control, q0)?;
        let psi1 = self.true_psi(Arm::Treated, q1)?;
        let psi0 = self.true_psi(Arm::Control, q0)?;
        let (mut mean, mut second) = (0.0, 0.0);
        self.for_each_atom(&[q0, q1], |atom, p| {
            let v = -self.eif_value(atom, Arm::Treated, q1, psi1) / f1 + self.eif_value(atom, Arm::Control, q0, psi0) / f0;
            mean += p * v;
            second += p * v * v;
        });
        Ok(second - mean * mean)
    }

    /// `sum_a gain_a(q_a(tau)) / f_a(q_a(tau))^2`.
    pub fn quantile_gain(&self, tau: f64) -> Result<f64> {
        let mut total = 0.0;
        for arm in Arm::BOTH {
            let q = self.quantile(arm, tau)?;
            let f = self.density(arm, q)?;
            total += self.efficiency_gain(arm, q)? / (f * f);
        }
        Ok(total)
    }

    /// Enumerated QTE variance difference between the benchmark and the
    /// surrogate-assisted influence functions.
    pub fn quantile_gain_enumerated(&self, tau: f64) -> Result<f64> {
        let rho0 = self.rho_x()?;
        let q = [self.quantile(Arm::Control, tau)?, self.quantile(Arm::Treated, tau)?];
        let f = [self.density(Arm::Control, q[0])?, self.density(Arm::Treated, q[1])?];
        let psi = [self.true_psi(Arm::Control, q[0])?, self.true_psi(Arm::Treated, q[1])?];
        let (mut sa, mut nos) = (0.0, 0.0);
        self.for_each_atom(&q, |atom, p| {
            let v = -self.eif_value(atom, Arm::Treated, q[1], psi[1]) / f[1]
                + self.eif_value(atom, Arm::Control, q[0], psi[0]) / f[0];
            let v0 = -self.nos_eif_value(atom, Arm::Treated, q[1], psi[1], &rho0[1]) / f[1]
                + self.nos_eif_value(atom, Arm::Control, q[0], psi[0], &rho0[0]) / f[0];
            sa += p * v * v;
            nos += p * v0 * v0;
        });
        Ok(nos - sa)
    }

    /// Index of `x` in the covariate support (exact match).
    pub fn x_index(&self, x: &[f64]) -> Option<usize> {
        self.x_support.iter().position(|v| v.as_slice() == x)
    }

    pub fn s_index(&self, s: &[f64]) -> Option<usize> {
        self.s_support.iter().position(|v| v.as_slice() == s)
    }

    /// Draws `n` i.i.d. observations; also returns the full-data version in
    /// which every source outcome is observed.
    pub fn sample_with_full(&self, n: usize, seed: u64) -> Result<(TwoSampleDataset, TwoSampleDataset)> {
        if n == 0 {
            return Err(Error::invalid("sample size must be positive"));
        }
        self.validate()?;
        let mut rng = rng_for(seed, &[0x5A]);
        let p = self.x_support[0].len();
        let q = self.s_support[0].len();
        let mut observed = Vec::with_capacity(n);
        let mut full = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            if u < self.pi0 {
                let x = draw_index(&mut rng, &self.p0);
                let xv = self.x_support[x].clone();
                observed.push(Observation::target(xv.clone()));
                full.push(Observation::target(xv));
            } else {
                let x = draw_index(&mut rng, &self.p1);
                let arm = if rng.random::<f64>() < self.e1[x] {
                    Arm::Treated
                } else {
                    Arm::Control
                };
                let s = draw_index(&mut rng, &self.s_pmf[arm.index()][x]);
                let validated = rng.random::<f64>() < self.rho_at(arm, x, s);
                let y = self.outcome[arm.index()][x][s].sample(&mut rng);
                let xv = self.x_support[x].clone();
                let sv = self.s_support[s].clone();
                observed.push(Observation::source(xv.clone(), arm, sv.clone(), validated.then_some(y)));
                full.push(Observation::source(xv, arm, sv, Some(y)));
            }
        }
        Ok((TwoSampleDataset::new(observed, p, q)?, TwoSampleDataset::new(full, p, q)?))
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<TwoSampleDataset> {
        Ok(self.sample_with_full(n, seed)?.0)
    }

    /// Random law with flat-Dirichlet pmfs and uniform propensities.
    pub fn random(seed: u64, opts: &RandomLawOptions) -> Self {
        let mut rng = rng_for(seed, &[0x1A]);
        let nx = opts.nx.max(1);
        let ns = opts.ns.max(1);
        let eps = opts.eps;
        let uniform = |rng: &mut rand_chacha::ChaCha8Rng| eps + (1.0 - 2.0 * eps) * rng.random::<f64>();
        let x_support: Vec<Vec<f64>> = (0..nx).map(|k| vec![k as f64 - 0.5 * (nx - 1) as f64]).collect();
        let s_support: Vec<Vec<f64>> = (0..ns).map(|k| vec![k as f64]).collect();
        let pi0 = 0.3 + 0.4 * rng.random::<f64>();
        let p0 = bounded_pmf(&mut rng, nx);
        let p1 = bounded_pmf(&mut rng, nx);
        let e1: Vec<f64> = (0..nx).map(|_| uniform(&mut rng)).collect();
        let y_support: Option<Vec<f64>> = opts.ny.map(|k| (0..k.max(1)).map(|j| j as f64).collect());
        let mut s_pmf = [Vec::new(), Vec::new()];
        let mut rho = [Vec::new(), Vec::new()];
        let mut outcome = [Vec::new(), Vec::new()];
        for a in 0..2 {
            for _ in 0..nx {
                s_pmf[a].push(bounded_pmf(&mut rng, ns));
                let rho_x = uniform(&mut rng);
                let row: Vec<f64> = (0..ns)
                    .map(|_| {
                        if opts.full_validation {
                            1.0
                        } else if opts.rho_x {
                            rho_x
                        } else {
                            uniform(&mut rng)
                        }
                    })
                    .collect();
                rho[a].push(row);
                let mut cells = Vec::with_capacity(ns);
                let shared = match &y_support {
                    Some(sup) => OutcomeLaw::Finite {
                        support: sup.clone(),
                        pmf: dirichlet_flat(&mut rng, sup.len()),
                    },
                    None => OutcomeLaw::Gaussian {
                        mean: rng.random::<f64>() * 2.0 - 1.0,
                        sd: 0.5 + rng.random::<f64>(),
                    },
                };
                for _ in 0..ns {
                    if opts.uninformative_surrogate {
                        cells.push(shared.clone());
                    } else {
                        cells.push(match &y_support {
                            Some(sup) => OutcomeLaw::Finite {
                                support: sup.clone(),
                                pmf: dirichlet_flat(&mut rng, sup.len()),
                            },
                            None => OutcomeLaw::Gaussian {
                                mean: rng.random::<f64>() * 2.0 - 1.0 + a as f64 * 0.5,
                                sd: 0.5 + rng.random::<f64>(),
                            },
                        });
                    }
                }
                outcome[a].push(cells);
            }
        }
        DiscreteLaw {
            pi0,
            x_support,
            p0,
            p1,
            e1,
            s_support,
            s_pmf,
            rho,
            outcome,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let law: DiscreteLaw = serde_json::from_str(text)?;
        law.validate()?;
        Ok(law)
    }
}
