//! Oracle influence-function variances under a simulation law, for the
//! no-surrogate versus surrogate-assisted QTE comparison.
//!
//! With `U = lambda_S beta_a'(S - h_a(X)) ~ N(0, t_a^2)` the surrogate enters
//! `m_a` only through `U`, so conditional moments of `m_a` given `X` are
//! one-dimensional Gauss-Hermite integrals; covariate expectations are Monte
//! Carlo averages.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Normal};

use tqte::seed::rng_for;
use tqte::Arm;

use crate::dgp::{DgpSpec, Validation};
use crate::error::{SimError, SimResult};
use crate::truth::TruthTable;

/// Nodes and weights integrating against the standard normal density.
pub fn gauss_hermite(k: usize) -> (Vec<f64>, Vec<f64>) {
    // Jacobi matrix of the probabilists' Hermite recurrence.
    let jac = DMatrix::from_fn(k, k, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..k)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

const HERMITE_ORDER: usize = 48;

/// Per-arm oracle variances at one `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmVariances {
    /// Target-covariate component `E_0{(g - psi)^2} / pi_0`.
    pub target: f64,
    /// `V_a(y)`.
    pub sa: f64,
    /// `V_{a,0}(y)`.
    pub nos: f64,
}

/// Monte Carlo oracle QTE variances at one tau.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QteVariances {
    pub sa: f64,
    pub nos: f64,
}

impl QteVariances {
    pub fn ratio(&self) -> f64 {
        self.nos / self.sa
    }
}

struct Draws {
    source: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
}

fn draws(spec: &DgpSpec, n_mc: usize, seed: u64) -> Draws {
    let mut rng = rng_for(seed, &[]);
    let source = (0..n_mc).map(|_| spec.sample_x(&mut rng, false)).collect();
    let target = (0..n_mc).map(|_| spec.sample_x(&mut rng, true)).collect();
    Draws { source, target }
}

fn constant_rho(spec: &DgpSpec) -> SimResult<f64> {
    match spec.validation {
        Validation::Constant { value } => Ok(value),
        _ => Err(SimError::Spec(
            "no-surrogate variance requires validation that depends on covariates only; use a constant validation rate"
                .into(),
        )),
    }
}

fn arm_variances(spec: &DgpSpec, d: &Draws, arm: Arm, y: f64, rho: f64) -> (ArmVariances, Vec<f64>) {
    let nrm = Normal::new(0.0, 1.0).expect("standard normal");
    let (nodes, weights) = gauss_hermite(HERMITE_ORDER);
    let pi0 = spec.target_fraction;
    let pi1 = 1.0 - pi0;
    let model = spec.arm(arm);
    let spread = spec.lambda_s * spec.surrogate_sd * model.beta.iter().map(|b| b * b).sum::<f64>().sqrt();
    let g_target: Vec<f64> = d.target.iter().map(|x| spec.g(arm, y, x)).collect();
    let psi = g_target.iter().sum::<f64>() / g_target.len() as f64;
    let centered: Vec<f64> = g_target.iter().map(|g| g - psi).collect();
    let target = centered.iter().map(|c| c * c).sum::<f64>() / centered.len() as f64 / pi0;
    let (mut sa, mut nos) = (0.0, 0.0);
    for x in &d.source {
        let (mu, _) = spec.marginal_moments(arm, x);
        let w = spec.omega(x).powi(2) / spec.e(arm, x);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for (z, wt) in nodes.iter().zip(&weights) {
            let m = nrm.cdf((y - mu - spread * z) / model.sigma);
            m1 += wt * m;
            m2 += wt * m * m;
        }
        let var_m = (m2 - m1 * m1).max(0.0);
        sa += w * (var_m + (m1 - m2) / rho);
        nos += w * m1 * (1.0 - m1) / rho;
    }
    let n1 = d.source.len() as f64;
    (
        ArmVariances {
            target,
            sa: target + sa / n1 / pi1,
            nos: target + nos / n1 / pi1,
        },
        centered,
    )
}

/// Oracle variances of the QTE influence function at each truth level.
pub fn qte_variances(spec: &DgpSpec, truth: &TruthTable, n_mc: usize, seed: u64) -> SimResult<Vec<QteVariances>> {
    let rho = constant_rho(spec)?;
    let d = draws(spec, n_mc, seed);
    let pi0 = spec.target_fraction;
    let mut out = Vec::with_capacity(truth.taus.len());
    for l in 0..truth.taus.len() {
        let (v1, c1) = arm_variances(spec, &d, Arm::Treated, truth.quantiles[1][l], rho);
        let (v0, c0) = arm_variances(spec, &d, Arm::Control, truth.quantiles[0][l], rho);
        let cross = c1.iter().zip(&c0).map(|(a, b)| a * b).sum::<f64>() / c1.len() as f64 / pi0;
        let (f1, f0) = (truth.density[1][l], truth.density[0][l]);
        let combine = |a: f64, b: f64| a / (f1 * f1) + b / (f0 * f0) - 2.0 * cross / (f1 * f0);
        out.push(QteVariances {
            sa: combine(v1.sa, v0.sa),
            nos: combine(v1.nos, v0.nos),
        });
    }
    Ok(out)
}

/// `sigma^2_{Delta,NoS}(tau) / sigma^2_{Delta,SA}(tau)` at each truth level.
pub fn theory_ratio(spec: &DgpSpec, truth: &TruthTable, n_mc: usize, seed: u64) -> SimResult<Vec<f64>> {
    Ok(qte_variances(spec, truth, n_mc, seed)?.iter().map(QteVariances::ratio).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::tests_support::linear_spec;
    use crate::truth::compute_truth;

    #[test]
    fn hermite_moments() {
        let (z, w) = gauss_hermite(20);
        let moment = |k: i32| z.iter().zip(&w).map(|(z, w)| w * z.powi(k)).sum::<f64>();
        assert!((moment(0) - 1.0).abs() < 1e-12);
        assert!(moment(1).abs() < 1e-12);
        assert!((moment(2) - 1.0).abs() < 1e-12);
        assert!((moment(4) - 3.0).abs() < 1e-10);
    }

    #[test]
    fn uninformative_surrogate_gives_unit_ratio() {
        let spec = linear_spec(0.0, 0.3, 0.5);
        let truth = compute_truth(&spec, &[0.5], 5000, 1).unwrap();
        let r = theory_ratio(&spec, &truth, 5000, 2).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn full_validation_gives_unit_ratio() {
        let spec = linear_spec(1.5, 1.0, 0.5);
        let truth = compute_truth(&spec, &[0.5], 5000, 1).unwrap();
        let r = theory_ratio(&spec, &truth, 5000, 2).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-10, "{r:?}");
    }

    #[test]
    fn gain_grows_with_surrogate_strength() {
        let r = |lambda: f64| {
            let spec = linear_spec(lambda, 0.2, 0.5);
            let truth = compute_truth(&spec, &[0.5], 5000, 1).unwrap();
            theory_ratio(&spec, &truth, 5000, 2).unwrap()[0]
        };
        let (r1, r2) = (r(1.0), r(2.0));
        assert!(r1 > 1.0 && r2 > r1, "{r1} {r2}");
    }
}
