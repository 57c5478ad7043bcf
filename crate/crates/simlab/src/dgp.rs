//! Parametric source/target simulation law.
//!
//! Source covariates are independent standard normals truncated to
//! `[-b, b]`; the target law is the exponential tilt `exp(c v'x)`, which per
//! coordinate is again a truncated normal with mean `c v_k`. Potential
//! surrogates are `S^a = h_a(X) + N(0, sd_S^2 I)` and outcomes
//! `Y^a = nu_a(X) + lambda_S beta_a'S^a + sigma_a eps`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use tqte::learners::expit;
use tqte::pipeline::OracleNuisances;
use tqte::seed::rng_for;
use tqte::{Arm, Observation, ThresholdGrid, TwoSampleDataset};

use crate::error::{SimError, SimResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    #[default]
    Linear,
    Tanh,
    Square,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    /// Zero-based covariate index.
    pub var: usize,
    #[serde(default)]
    pub basis: Basis,
    pub coef: f64,
}

/// `intercept + sum_k coef_k * basis_k(x[var_k])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Affine {
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub terms: Vec<Term>,
}

impl Affine {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().fold(self.intercept, |acc, t| {
            let v = x[t.var];
            acc + t.coef
                * match t.basis {
                    Basis::Linear => v,
                    Basis::Tanh => v.tanh(),
                    Basis::Square => v * v,
                }
        })
    }

    fn max_var(&self) -> Option<usize> {
        self.terms.iter().map(|t| t.var).max()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Treatment {
    Randomized { treated: f64 },
    /// `P(A = 1 | X) = expit(intercept + coef'x)`.
    Logistic { intercept: f64, coef: Vec<f64> },
}

impl Treatment {
    pub fn treated_probability(&self, x: &[f64]) -> f64 {
        match self {
            Treatment::Randomized { treated } => *treated,
            Treatment::Logistic { intercept, coef } => expit(intercept + dot(coef, x)),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Treatment::Randomized { .. } => "randomized",
            Treatment::Logistic { .. } => "observational",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Validation {
    Constant {
        value: f64,
    },
    /// `clamp(expit(intercept + x'x_coef + s's_coef + arm * a), lower, upper)`.
    Logistic {
        intercept: f64,
        x_coef: Vec<f64>,
        s_coef: Vec<f64>,
        #[serde(default)]
        arm_coef: f64,
        lower: f64,
        upper: f64,
    },
}

impl Validation {
    pub fn probability(&self, arm: Arm, x: &[f64], s: &[f64]) -> f64 {
        match self {
            Validation::Constant { value } => *value,
            Validation::Logistic {
                intercept,
                x_coef,
                s_coef,
                arm_coef,
                lower,
                upper,
            } => {
                let t = intercept + dot(x_coef, x) + dot(s_coef, s) + arm_coef * arm.index() as f64;
                expit(t).clamp(*lower, *upper)
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Validation::Constant { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmModel {
    /// `h_a`, one entry per surrogate coordinate.
    pub surrogate: Vec<Affine>,
    /// `nu_a`.
    pub outcome_mean: Affine,
    pub beta: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub p: usize,
    pub q: usize,
    #[serde(default = "default_target_fraction")]
    pub target_fraction: f64,
    #[serde(default = "default_bound")]
    pub support_bound: f64,
    /// Tilt strength `c`.
    pub tilt: f64,
    pub tilt_direction: Vec<f64>,
    pub surrogate_sd: f64,
    pub lambda_s: f64,
    pub treatment: Treatment,
    pub validation: Validation,
    /// `[control, treated]`.
    pub arms: [ArmModel; 2],
}

fn default_target_fraction() -> f64 {
    0.5
}

fn default_bound() -> f64 {
    2.0
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Draw from `N(mean, 1)` truncated to `[-b, b]`.
fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, b: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let v = mean + z;
        if v.abs() <= b {
            return v;
        }
    }
}

impl DgpSpec {
    pub fn arm(&self, arm: Arm) -> &ArmModel {
        &self.arms[arm.index()]
    }

    /// Structural checks and a positivity audit over the bounded support.
    pub fn validate(&self, epsilon: f64) -> SimResult<()> {
        let bad = |m: String| Err(SimError::Spec(m));
        if self.p == 0 || self.q == 0 {
            return bad("p and q must be positive".into());
        }
        if !(self.target_fraction > 0.0 && self.target_fraction < 1.0) {
            return bad(format!("target_fraction must lie in (0, 1), got {}", self.target_fraction));
        }
        if !(self.support_bound > 0.0) {
            return bad("support_bound must be positive".into());
        }
        if self.tilt_direction.len() != self.p {
            return bad(format!("tilt_direction needs {} entries", self.p));
        }
        if !(self.surrogate_sd > 0.0) {
            return bad("surrogate_sd must be positive".into());
        }
        for (a, m) in self.arms.iter().enumerate() {
            if m.surrogate.len() != self.q || m.beta.len() != self.q {
                return bad(format!("arm {a}: surrogate and beta need {} entries", self.q));
            }
            if !(m.sigma > 0.0) {
                return bad(format!("arm {a}: sigma must be positive"));
            }
            let vars = m.surrogate.iter().chain(std::iter::once(&m.outcome_mean)).filter_map(Affine::max_var);
            if vars.max().is_some_and(|v| v >= self.p) {
                return bad(format!("arm {a}: a term refers to a covariate beyond p = {}", self.p));
            }
        }
        let b = self.support_bound;
        let e_range = match &self.treatment {
            Treatment::Randomized { treated } => (*treated, *treated),
            Treatment::Logistic { intercept, coef } => {
                if coef.len() != self.p {
                    return bad(format!("treatment coef needs {} entries", self.p));
                }
                let r = b * coef.iter().map(|c| c.abs()).sum::<f64>();
                (expit(intercept - r), expit(intercept + r))
            }
        };
        if e_range.0 < epsilon || e_range.1 > 1.0 - epsilon {
            return bad(format!(
                "positivity: treatment probability ranges over [{:.4}, {:.4}], outside [{epsilon}, {}]",
                e_range.0,
                e_range.1,
                1.0 - epsilon
            ));
        }
        match &self.validation {
            Validation::Constant { value } => {
                if !(*value >= epsilon && *value <= 1.0) {
                    return bad(format!("positivity: constant validation {value} below {epsilon}"));
                }
            }
            Validation::Logistic {
                x_coef,
                s_coef,
                lower,
                upper,
                ..
            } => {
                if x_coef.len() != self.p || s_coef.len() != self.q {
                    return bad("validation coefficient lengths must match p and q".into());
                }
                if !(*lower >= epsilon && lower <= upper && *upper <= 1.0) {
                    return bad(format!("positivity: validation clamp [{lower}, {upper}] must sit inside [{epsilon}, 1]"));
                }
            }
        }
        let (lo, hi) = self.omega_range();
        if lo < epsilon || hi > 1.0 / epsilon {
            return bad(format!(
                "positivity: density ratio ranges over [{lo:.4}, {hi:.4}], outside [{epsilon}, {}]",
                1.0 / epsilon
            ));
        }
        Ok(())
    }

    fn log_normalizer(&self) -> f64 {
        // E_1 exp(t X_k) for X_k ~ TN(0, 1, [-b, b]) is
        // exp(t^2 / 2) (Phi(b - t) - Phi(-b - t)) / (Phi(b) - Phi(-b)).
        let nrm = std_normal();
        let b = self.support_bound;
        let mass = nrm.cdf(b) - nrm.cdf(-b);
        self.tilt_direction
            .iter()
            .map(|&v| {
                let t = self.tilt * v;
                t * t / 2.0 + ((nrm.cdf(b - t) - nrm.cdf(-b - t)) / mass).ln()
            })
            .sum()
    }

    pub fn omega(&self, x: &[f64]) -> f64 {
        (self.tilt * dot(&self.tilt_direction, x) - self.log_normalizer()).exp()
    }

    pub fn omega_fn(&self) -> Arc<dyn Fn(&[f64]) -> f64 + Send + Sync> {
        let ln = self.log_normalizer();
        let v: Vec<f64> = self.tilt_direction.iter().map(|d| d * self.tilt).collect();
        Arc::new(move |x: &[f64]| (dot(&v, x) - ln).exp())
    }

    fn omega_range(&self) -> (f64, f64) {
        let r = self.tilt.abs() * self.support_bound * self.tilt_direction.iter().map(|v| v.abs()).sum::<f64>();
        let ln = self.log_normalizer();
        ((-r - ln).exp(), (r - ln).exp())
    }

    pub fn sample_x<R: Rng + ?Sized>(&self, rng: &mut R, target: bool) -> Vec<f64> {
        (0..self.p)
            .map(|k| {
                let mean = if target { self.tilt * self.tilt_direction[k] } else { 0.0 };
                truncated_normal(rng, mean, self.support_bound)
            })
            .collect()
    }

    pub fn surrogate_mean(&self, arm: Arm, x: &[f64]) -> Vec<f64> {
        self.arm(arm).surrogate.iter().map(|h| h.eval(x)).collect()
    }

    /// `E(Y^a | X = x, S^a = s)`.
    pub fn outcome_mean(&self, arm: Arm, x: &[f64], s: &[f64]) -> f64 {
        let m = self.arm(arm);
        m.outcome_mean.eval(x) + self.lambda_s * dot(&m.beta, s)
    }

    /// Mean and standard deviation of `Y^a` given `X = x`.
    pub fn marginal_moments(&self, arm: Arm, x: &[f64]) -> (f64, f64) {
        let m = self.arm(arm);
        let h = self.surrogate_mean(arm, x);
        let mu = m.outcome_mean.eval(x) + self.lambda_s * dot(&m.beta, &h);
        (mu, self.marginal_sd(arm))
    }

    pub fn marginal_sd(&self, arm: Arm) -> f64 {
        let m = self.arm(arm);
        let b2: f64 = m.beta.iter().map(|b| b * b).sum();
        (m.sigma * m.sigma + self.lambda_s * self.lambda_s * self.surrogate_sd * self.surrogate_sd * b2).sqrt()
    }

    /// `m_a(y, x, s)`.
    pub fn m(&self, arm: Arm, y: f64, x: &[f64], s: &[f64]) -> f64 {
        std_normal().cdf((y - self.outcome_mean(arm, x, s)) / self.arm(arm).sigma)
    }

    /// `g_a(y, x)`.
    pub fn g(&self, arm: Arm, y: f64, x: &[f64]) -> f64 {
        let (mu, sd) = self.marginal_moments(arm, x);
        std_normal().cdf((y - mu) / sd)
    }

    pub fn g_density(&self, arm: Arm, y: f64, x: &[f64]) -> f64 {
        let (mu, sd) = self.marginal_moments(arm, x);
        std_normal().pdf((y - mu) / sd) / sd
    }

    pub fn e(&self, arm: Arm, x: &[f64]) -> f64 {
        let p1 = self.treatment.treated_probability(x);
        if arm == Arm::Treated {
            p1
        } else {
            1.0 - p1
        }
    }

    /// Draws `n` units; returns the observed data and its full-data twin in
    /// which every source outcome is observed.
    pub fn generate_with_full(&self, n: usize, seed: u64) -> SimResult<(TwoSampleDataset, TwoSampleDataset)> {
        if n == 0 {
            return Err(SimError::Spec("sample size must be positive".into()));
        }
        let mut rng = rng_for(seed, &[]);
        let mut observed = Vec::with_capacity(n);
        let mut full = Vec::with_capacity(n);
        for _ in 0..n {
            let target = rng.random::<f64>() < self.target_fraction;
            let x = self.sample_x(&mut rng, target);
            if target {
                observed.push(Observation::target(x.clone()));
                full.push(Observation::target(x));
                continue;
            }
            let arm = if rng.random::<f64>() < self.treatment.treated_probability(&x) {
                Arm::Treated
            } else {
                Arm::Control
            };
            let s: Vec<f64> = self
                .surrogate_mean(arm, &x)
                .into_iter()
                .map(|h| h + self.surrogate_sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let eps: f64 = rng.sample(StandardNormal);
            let y = self.outcome_mean(arm, &x, &s) + self.arm(arm).sigma * eps;
            let validated = rng.random::<f64>() < self.validation.probability(arm, &x, &s);
            observed.push(Observation::source(x.clone(), arm, s.clone(), validated.then_some(y)));
            full.push(Observation::source(x, arm, s, Some(y)));
        }
        Ok((
            TwoSampleDataset::new(observed, self.p, self.q)?,
            TwoSampleDataset::new(full, self.p, self.q)?,
        ))
    }

    pub fn generate(&self, n: usize, seed: u64) -> SimResult<TwoSampleDataset> {
        Ok(self.generate_with_full(n, seed)?.0)
    }

    /// Closed-form nuisances; `full_data` sets `rho = 1`.
    pub fn oracle_nuisances(&self, grid: &ThresholdGrid, full_data: bool) -> OracleNuisances {
        let (s1, s2, s3, s4) = (
            Arc::new(self.clone()),
            Arc::new(self.clone()),
            Arc::new(self.clone()),
            Arc::new(self.clone()),
        );
        OracleNuisances {
            grid: grid.clone(),
            m: Arc::new(move |a, y, x, s| s1.m(a, y, x, s)),
            g: Arc::new(move |a, y, x| s2.g(a, y, x)),
            e: Arc::new(move |a, x| s3.e(a, x)),
            rho: Arc::new(move |a, x, s| if full_data { 1.0 } else { s4.validation.probability(a, x, s) }),
            omega: self.omega_fn(),
        }
    }
}
