//! Cross-fitted nuisance estimation over a threshold grid.
//!
//! For every fold `k` and arm `a` the models are trained on the units outside
//! fold `k`:
//!
//! * `m_a(y_j, x, s)` on validated source units of arm `a`, response `1(Y <= y_j)`;
//! * `g_a(y_j, x)` on all source units of arm `a`, response the inner-fold
//!   prediction of `m_a(y_j, X_i, S_i)` from a model that excluded unit `i`;
//! * `e_a(x)` known or logistic on source units;
//! * `rho_a(x, s)` logistic for `M` on source units of arm `a`;
//! * `omega(x)` by classifier, entropy balancing, or a known function,
//!   normalized on the training source units.
//!
//! Per-threshold models of one `(fold, arm)` share a feature map, so a whole
//! bank is evaluated with one matrix product.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Arm, FoldAssignment, Observation, ThresholdGrid, TwoSampleDataset};
use crate::error::{Error, Result};
use crate::learners::{
    clip, expit, fit_classifier_ratio, fit_entropy_balance, solve_logistic, DensityRatioModel, FeatureMap,
    FeatureSpec, LogisticModel, RidgeSystem,
};
use crate::seed::{derive_seed, rng_for};

/// Linear predictor used in place of a logistic fit whose labels are all
/// equal; `expit(+-40)` is within `5e-18` of the limiting probability.
const SATURATED_LOGIT: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    Logistic,
    Ridge,
    /// Ridge on random Fourier features.
    Krr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSpec {
    pub learner: Learner,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default = "default_penalty")]
    pub penalty: f64,
}

fn default_penalty() -> f64 {
    1e-4
}

impl RegressionSpec {
    pub fn new(learner: Learner, features: FeatureSpec, penalty: f64) -> Self {
        RegressionSpec {
            learner,
            features,
            penalty,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.penalty >= 0.0) || !self.penalty.is_finite() {
            return Err(Error::invalid(format!("{what}: penalty must be finite and >= 0")));
        }
        let rff = matches!(self.features, FeatureSpec::RandomFourier { .. });
        if self.learner == Learner::Krr && !rff {
            return Err(Error::invalid(format!("{what}: learner `krr` requires random_fourier features")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PropensitySpec {
    /// Randomized design: `P(A = 1 | X) = treated`.
    Known { treated: f64 },
    Logistic {
        #[serde(default)]
        features: FeatureSpec,
        #[serde(default = "default_penalty")]
        penalty: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OmegaSpec {
    Classifier {
        #[serde(default)]
        features: FeatureSpec,
        #[serde(default = "default_penalty")]
        penalty: f64,
    },
    EntropyBalance {
        #[serde(default)]
        features: FeatureSpec,
    },
    /// Supplied by the caller through [`fit_nuisances_with`].
    Known,
}

/// Learner configuration for all nuisances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceConfig {
    /// Model for `m_a` on `(x, s)`.
    pub m: RegressionSpec,
    /// Second-stage regression for `g_a` on `x`.
    pub g: RegressionSpec,
    pub e: PropensitySpec,
    /// Logistic model for `rho_a` on `(x, s)`; its feature spec is reused on
    /// `x` alone for the no-surrogate validation model.
    pub rho: RegressionSpec,
    pub omega: OmegaSpec,
    /// Direct model for `g_a^nos` on `x`; `None` skips the no-surrogate fits.
    #[serde(default)]
    pub nos: Option<RegressionSpec>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_inner_folds")]
    pub inner_folds: usize,
}

fn default_epsilon() -> f64 {
    0.01
}

fn default_inner_folds() -> usize {
    2
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            m: RegressionSpec::new(Learner::Logistic, FeatureSpec::Raw, 1e-4),
            g: RegressionSpec::new(
                Learner::Ridge,
                FeatureSpec::Polynomial {
                    degree: 2,
                    interactions: true,
                },
                1e-4,
            ),
            e: PropensitySpec::Logistic {
                features: FeatureSpec::Raw,
                penalty: 1e-4,
            },
            rho: RegressionSpec::new(Learner::Logistic, FeatureSpec::Raw, 1e-4),
            omega: OmegaSpec::Classifier {
                features: FeatureSpec::Raw,
                penalty: 1e-4,
            },
            nos: None,
            epsilon: default_epsilon(),
            inner_folds: default_inner_folds(),
        }
    }
}

impl NuisanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::invalid(format!("epsilon must lie in (0, 0.5), got {}", self.epsilon)));
        }
        if self.inner_folds < 2 {
            return Err(Error::invalid("inner_folds must be at least 2"));
        }
        self.m.validate("m")?;
        self.g.validate("g")?;
        self.rho.validate("rho")?;
        if self.rho.learner != Learner::Logistic {
            return Err(Error::invalid("rho: only the logistic learner is supported"));
        }
        if let Some(nos) = &self.nos {
            nos.validate("nos")?;
        }
        match &self.e {
            PropensitySpec::Known { treated } => {
                if !(*treated > 0.0 && *treated < 1.0) {
                    return Err(Error::invalid("e: known treated probability must lie in (0, 1)"));
                }
            }
            PropensitySpec::Logistic { penalty, .. } => {
                if !(*penalty >= 0.0) {
                    return Err(Error::invalid("e: penalty must be >= 0"));
                }
            }
        }
        if let OmegaSpec::Classifier { penalty, .. } = &self.omega {
            if !(*penalty >= 0.0) {
                return Err(Error::invalid("omega: penalty must be >= 0"));
            }
        }
        Ok(())
    }
}

/// A known function of the covariates.
pub type CovariateFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Per-threshold models sharing one feature map: column `j` of `coef`
/// and entry `j` of `intercept` give the model at `y_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBank {
    pub map: FeatureMap,
    pub logistic: bool,
    pub coef: DMatrix<f64>,
    pub intercept: DVector<f64>,
}

impl ModelBank {
    pub fn len(&self) -> usize {
        self.intercept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intercept.is_empty()
    }

    /// Clipped predictions for a design already mapped by `self.map`:
    /// an `n x J` matrix.
    fn predict_design(&self, design: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = design * &self.coef;
        let logistic = self.logistic;
        for j in 0..out.ncols() {
            let b = self.intercept[j];
            for v in out.column_mut(j).iter_mut() {
                let t = *v + b;
                *v = clip(if logistic { expit(t) } else { t }, 0.0, 1.0);
            }
        }
        out
    }

    fn predict_rows(&self, rows: &[Vec<f64>]) -> DMatrix<f64> {
        let design = self.map.design(rows.iter().map(Vec::as_slice));
        self.predict_design(&design)
    }
}

/// A probability model: fitted logistic, or constant when labels were pure.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbabilityModel {
    Constant(f64),
    Logistic(LogisticModel),
}

impl ProbabilityModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            ProbabilityModel::Constant(p) => *p,
            ProbabilityModel::Logistic(m) => m.predict_proba(x),
        }
    }
}

#[derive(Clone)]
enum PropensityFit {
    Known(f64),
    Fitted(ProbabilityModel),
}

#[derive(Clone)]
enum OmegaFit {
    Model(DensityRatioModel),
    Known(CovariateFn),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NosFit {
    pub g: ModelBank,
    pub rho0: ProbabilityModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmFit {
    pub m: ModelBank,
    pub g: ModelBank,
    pub rho: ProbabilityModel,
    pub nos: Option<NosFit>,
}

#[derive(Clone)]
struct FoldFit {
    e: PropensityFit,
    omega: OmegaFit,
    arms: [ArmFit; 2],
}

/// Fitted nuisances `eta^(-k)` for every fold, over one threshold grid.
#[derive(Clone)]
pub struct FittedNuisances {
    grid: ThresholdGrid,
    config: NuisanceConfig,
    folds: FoldAssignment,
    fits: Vec<FoldFit>,
}

/// Evaluated nuisances for one arm: row `i` belongs to observation `i` and
/// uses the models of its fold. Entries that the estimators never read
/// (e.g. `m` on target units) are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceValues {
    pub arm: Arm,
    pub grid: ThresholdGrid,
    /// `n x J`.
    pub m: DMatrix<f64>,
    /// `n x J`.
    pub g: DMatrix<f64>,
    pub e: Vec<f64>,
    pub rho: Vec<f64>,
    pub omega: Vec<f64>,
}

impl NuisanceValues {
    /// No-surrogate view: `m` replaced by `g`.
    pub fn without_surrogate(&self) -> NuisanceValues {
        NuisanceValues {
            m: self.g.clone(),
            ..self.clone()
        }
    }
}

/// Nuisance values at one observation and grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisancePoint {
    /// `None` on target units; also `None` on source units of the other arm.
    pub m: Option<f64>,
    pub g: f64,
    pub e: Option<f64>,
    pub rho: Option<f64>,
    pub omega: f64,
}

/// Anything that can produce per-observation nuisance values.
pub trait Nuisances {
    fn grid(&self) -> &ThresholdGrid;

    fn values(&self, ds: &TwoSampleDataset, folds: &FoldAssignment, arm: Arm) -> Result<NuisanceValues>;

    /// Values at grid point `y` for `obs`, using the models of `fold`.
    fn evaluate(&self, fold: usize, arm: Arm, y: f64, obs: &Observation) -> Result<NuisancePoint>;
}

fn joined(x: &[f64], s: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + s.len());
    v.extend_from_slice(x);
    v.extend_from_slice(s);
    v
}

fn xs_of(ds: &TwoSampleDataset, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| ds.get(i).x().to_vec()).collect()
}

fn xss_of(ds: &TwoSampleDataset, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter()
        .map(|&i| {
            let rec = ds.get(i).as_source().expect("source unit");
            joined(&rec.x, &rec.s)
        })
        .collect()
}

fn outcome(ds: &TwoSampleDataset, i: usize) -> f64 {
    ds.get(i).as_source().and_then(|r| r.y).expect("validated unit")
}

/// Fits a logistic model for binary or fractional labels, falling back to a
/// constant when the labels are all 0 or all 1.
fn fit_probability(design: &DMatrix<f64>, labels: &[f64], penalty: f64, map: &FeatureMap) -> Result<ProbabilityModel> {
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    if labels.iter().all(|&v| v == 0.0) || labels.iter().all(|&v| v == 1.0) {
        return Ok(ProbabilityModel::Constant(mean));
    }
    let (coef, intercept, convergence) = solve_logistic(design, labels, penalty, None)?;
    Ok(ProbabilityModel::Logistic(LogisticModel {
        map: map.clone(),
        coef,
        intercept,
        penalty,
        convergence,
    }))
}

/// One model per threshold. `labels(j)` gives the response column for `y_j`.
fn fit_bank(
    spec: &RegressionSpec,
    map: &FeatureMap,
    design: &DMatrix<f64>,
    j_count: usize,
    labels: &dyn Fn(usize) -> Vec<f64>,
) -> Result<ModelBank> {
    let d = design.ncols();
    let mut coef = DMatrix::<f64>::zeros(d, j_count);
    let mut intercept = DVector::<f64>::zeros(j_count);
    match spec.learner {
        Learner::Logistic => {
            let mut warm: Option<(Vec<f64>, f64)> = None;
            for j in 0..j_count {
                let z = labels(j);
                if z.iter().all(|&v| v == 0.0) || z.iter().all(|&v| v == 1.0) {
                    intercept[j] = if z[0] == 1.0 { SATURATED_LOGIT } else { -SATURATED_LOGIT };
                    continue;
                }
                let start = warm.as_ref().map(|(c, b)| (c.as_slice(), *b));
                let (c, b, _) = solve_logistic(design, &z, spec.penalty, start)?;
                coef.column_mut(j).copy_from_slice(&c);
                intercept[j] = b;
                warm = Some((c, b));
            }
        }
        Learner::Ridge | Learner::Krr => {
            let system = RidgeSystem::new(design, spec.penalty, true)?;
            for j in 0..j_count {
                let (c, b, _) = system.solve(&labels(j));
                coef.column_mut(j).copy_from_slice(&c);
                intercept[j] = b;
            }
        }
    }
    Ok(ModelBank {
        map: map.clone(),
        logistic: spec.learner == Learner::Logistic,
        coef,
        intercept,
    })
}

fn threshold_labels<'a>(ys: &'a [f64], grid: &'a ThresholdGrid) -> impl Fn(usize) -> Vec<f64> + 'a {
    move |j| {
        let t = grid.points()[j];
        ys.iter().map(|&y| if y <= t { 1.0 } else { 0.0 }).collect()
    }
}

// Stream identifiers for seeds and feature maps.
const NUIS_M: u64 = 1;
const NUIS_G: u64 = 2;
const NUIS_E: u64 = 3;
const NUIS_RHO: u64 = 4;
const NUIS_OMEGA: u64 = 5;
const NUIS_NOS: u64 = 6;
const NUIS_RHO0: u64 = 7;
const INNER_SPLIT: u64 = 8;

fn fit_arm(
    ds: &TwoSampleDataset,
    train: &[usize],
    fold: usize,
    arm: Arm,
    grid: &ThresholdGrid,
    cfg: &NuisanceConfig,
    seed: u64,
) -> Result<ArmFit> {
    let src: Vec<usize> = train
        .iter()
        .copied()
        .filter(|&i| ds.get(i).as_source().is_some_and(|r| r.arm == arm))
        .collect();
    let validated: Vec<usize> = src.iter().copied().filter(|&i| ds.get(i).m() == Some(true)).collect();
    let k_inner = cfg.inner_folds;
    if src.is_empty() {
        return Err(Error::EmptyStratum(format!(
            "fold {} arm {}: no training source units",
            fold + 1,
            arm.index()
        )));
    }
    if validated.len() < k_inner {
        return Err(Error::EmptyStratum(format!(
            "fold {} arm {}: {} validated training unit(s), need at least {k_inner}",
            fold + 1,
            arm.index(),
            validated.len()
        )));
    }
    let path = |nuis: u64| derive_seed(seed, &[fold as u64, arm.index() as u64, nuis]);
    let j_count = grid.len();
    let p = ds.p();
    let q = ds.q();

    // m on (x, s) over validated units.
    let xs_val = xss_of(ds, &validated);
    let m_map = FeatureMap::from_spec(&cfg.m.features, p + q, path(NUIS_M), &xs_val)?;
    let y_val: Vec<f64> = validated.iter().map(|&i| outcome(ds, i)).collect();
    let m_design = m_map.design(xs_val.iter().map(Vec::as_slice));
    let m = fit_bank(&cfg.m, &m_map, &m_design, j_count, &threshold_labels(&y_val, grid))?;

    // Inner folds over source units of the arm, stratified by M.
    let mut inner_of = vec![0usize; src.len()];
    {
        let mut rng = rng_for(path(INNER_SPLIT), &[]);
        let mut next = 0usize;
        for want in [true, false] {
            let mut members: Vec<usize> = (0..src.len()).filter(|&t| (ds.get(src[t]).m() == Some(true)) == want).collect();
            members.shuffle(&mut rng);
            for t in members {
                inner_of[t] = next % k_inner;
                next += 1;
            }
        }
    }
    let xs_src = xss_of(ds, &src);
    let mut generated = DMatrix::<f64>::zeros(src.len(), j_count);
    for l in 0..k_inner {
        let fit_rows: Vec<usize> = (0..src.len())
            .filter(|&t| inner_of[t] != l && ds.get(src[t]).m() == Some(true))
            .collect();
        let eval_rows: Vec<usize> = (0..src.len()).filter(|&t| inner_of[t] == l).collect();
        if fit_rows.is_empty() {
            return Err(Error::EmptyStratum(format!(
                "fold {} arm {}: inner fold {} leaves no validated units",
                fold + 1,
                arm.index(),
                l + 1
            )));
        }
        let rows: Vec<Vec<f64>> = fit_rows.iter().map(|&t| xs_src[t].clone()).collect();
        let ys: Vec<f64> = fit_rows.iter().map(|&t| outcome(ds, src[t])).collect();
        let design = m_map.design(rows.iter().map(Vec::as_slice));
        let bank = fit_bank(&cfg.m, &m_map, &design, j_count, &threshold_labels(&ys, grid))?;
        let eval: Vec<Vec<f64>> = eval_rows.iter().map(|&t| xs_src[t].clone()).collect();
        let pred = bank.predict_rows(&eval);
        for (r, &t) in eval_rows.iter().enumerate() {
            generated.row_mut(t).copy_from(&pred.row(r));
        }
    }

    // g on x over all source units of the arm.
    let x_src = xs_of(ds, &src);
    let g_map = FeatureMap::from_spec(&cfg.g.features, p, path(NUIS_G), &x_src)?;
    let g_design = g_map.design(x_src.iter().map(Vec::as_slice));
    let g = fit_bank(&cfg.g, &g_map, &g_design, j_count, &|j| generated.column(j).iter().copied().collect())?;

    // rho on (x, s).
    let labels: Vec<f64> = src
        .iter()
        .map(|&i| if ds.get(i).m() == Some(true) { 1.0 } else { 0.0 })
        .collect();
    let rho_map = FeatureMap::from_spec(&cfg.rho.features, p + q, path(NUIS_RHO), &xs_src)?;
    let rho_design = rho_map.design(xs_src.iter().map(Vec::as_slice));
    let rho = fit_probability(&rho_design, &labels, cfg.rho.penalty, &rho_map)?;

    let nos = match &cfg.nos {
        None => None,
        Some(spec) => {
            let x_val = xs_of(ds, &validated);
            let map = FeatureMap::from_spec(&spec.features, p, path(NUIS_NOS), &x_val)?;
            let design = map.design(x_val.iter().map(Vec::as_slice));
            let g = fit_bank(spec, &map, &design, j_count, &threshold_labels(&y_val, grid))?;
            let rho0_map = FeatureMap::from_spec(&cfg.rho.features, p, path(NUIS_RHO0), &x_src)?;
            let rho0_design = rho0_map.design(x_src.iter().map(Vec::as_slice));
            let rho0 = fit_probability(&rho0_design, &labels, cfg.rho.penalty, &rho0_map)?;
            Some(NosFit { g, rho0 })
        }
    };
    Ok(ArmFit { m, g, rho, nos })
}

fn fit_fold(
    ds: &TwoSampleDataset,
    folds: &FoldAssignment,
    fold: usize,
    grid: &ThresholdGrid,
    cfg: &NuisanceConfig,
    seed: u64,
    known_omega: Option<&CovariateFn>,
) -> Result<FoldFit> {
    let train = folds.training(fold);
    let path = |nuis: u64| derive_seed(seed, &[fold as u64, 2, nuis]);
    let p = ds.p();
    let src: Vec<usize> = train.iter().copied().filter(|&i| ds.get(i).is_source()).collect();
    let tgt: Vec<usize> = train.iter().copied().filter(|&i| !ds.get(i).is_source()).collect();
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::EmptyStratum(format!(
            "fold {}: training set needs target and source units (n0 = {}, n1 = {})",
            fold + 1,
            tgt.len(),
            src.len()
        )));
    }

    let e = match &cfg.e {
        PropensitySpec::Known { treated } => PropensityFit::Known(*treated),
        PropensitySpec::Logistic { features, penalty } => {
            let rows = xs_of(ds, &src);
            let map = FeatureMap::from_spec(features, p, path(NUIS_E), &rows)?;
            let design = map.design(rows.iter().map(Vec::as_slice));
            let labels: Vec<f64> = src
                .iter()
                .map(|&i| match ds.get(i).as_source() {
                    Some(r) if r.arm == Arm::Treated => 1.0,
                    _ => 0.0,
                })
                .collect();
            PropensityFit::Fitted(fit_probability(&design, &labels, *penalty, &map)?)
        }
    };

    let omega = match &cfg.omega {
        OmegaSpec::Classifier { features, penalty } => {
            let rows = xs_of(ds, &train);
            let is_target: Vec<bool> = train.iter().map(|&i| !ds.get(i).is_source()).collect();
            let map = FeatureMap::from_spec(features, p, path(NUIS_OMEGA), &rows)?;
            OmegaFit::Model(fit_classifier_ratio(&map, &rows, &is_target, *penalty, cfg.epsilon)?)
        }
        OmegaSpec::EntropyBalance { features } => {
            let src_rows = xs_of(ds, &src);
            let tgt_rows = xs_of(ds, &tgt);
            let map = FeatureMap::from_spec(features, p, path(NUIS_OMEGA), &src_rows)?;
            let tgt_design = map.design(tgt_rows.iter().map(Vec::as_slice));
            let means: Vec<f64> = (0..tgt_design.ncols()).map(|j| tgt_design.column(j).mean()).collect();
            OmegaFit::Model(fit_entropy_balance(&map, &src_rows, &means, cfg.epsilon)?.model)
        }
        OmegaSpec::Known => match known_omega {
            Some(f) => OmegaFit::Known(f.clone()),
            None => return Err(Error::invalid("omega kind `known` requires a supplied density ratio")),
        },
    };

    let arms: Vec<ArmFit> = Arm::BOTH
        .par_iter()
        .map(|&arm| fit_arm(ds, &train, fold, arm, grid, cfg, seed))
        .collect::<Result<_>>()?;
    let mut it = arms.into_iter();
    let arms = [it.next().expect("control"), it.next().expect("treated")];
    Ok(FoldFit { e, omega, arms })
}

/// Fits all nuisances. `known omega` configurations must use
/// [`fit_nuisances_with`].
pub fn fit_nuisances(
    ds: &TwoSampleDataset,
    folds: &FoldAssignment,
    grid: &ThresholdGrid,
    config: &NuisanceConfig,
    seed: u64,
) -> Result<FittedNuisances> {
    fit_nuisances_with(ds, folds, grid, config, seed, None)
}

pub fn fit_nuisances_with(
    ds: &TwoSampleDataset,
    folds: &FoldAssignment,
    grid: &ThresholdGrid,
    config: &NuisanceConfig,
    seed: u64,
    known_omega: Option<CovariateFn>,
) -> Result<FittedNuisances> {
    config.validate()?;
    if folds.n() != ds.n() {
        return Err(Error::invalid(format!(
            "fold assignment covers {} units but the dataset has {}",
            folds.n(),
            ds.n()
        )));
    }
    let fits: Vec<FoldFit> = (0..folds.k())
        .into_par_iter()
        .map(|k| fit_fold(ds, folds, k, grid, config, seed, known_omega.as_ref()))
        .collect::<Result<_>>()?;
    Ok(FittedNuisances {
        grid: grid.clone(),
        config: config.clone(),
        folds: folds.clone(),
        fits,
    })
}

impl FittedNuisances {
    pub fn config(&self) -> &NuisanceConfig {
        &self.config
    }

    pub fn folds(&self) -> &FoldAssignment {
        &self.folds
    }

    pub fn arm_fit(&self, fold: usize, arm: Arm) -> &ArmFit {
        &self.fits[fold].arms[arm.index()]
    }

    /// Number of per-threshold `m` models in the main (non-inner) banks.
    pub fn m_model_count(&self) -> usize {
        self.fits.iter().flat_map(|f| f.arms.iter()).map(|a| a.m.len()).sum()
    }

    pub fn g_model_count(&self) -> usize {
        self.fits.iter().flat_map(|f| f.arms.iter()).map(|a| a.g.len()).sum()
    }

    fn eps(&self) -> f64 {
        self.config.epsilon
    }

    fn e_value(&self, fold: usize, arm: Arm, x: &[f64]) -> f64 {
        let p1 = match &self.fits[fold].e {
            PropensityFit::Known(p) => *p,
            PropensityFit::Fitted(m) => m.predict(x),
        };
        let e = if arm == Arm::Treated { p1 } else { 1.0 - p1 };
        clip(e, self.eps(), 1.0 - self.eps())
    }

    /// Training-source-normalized density ratio of `fold` at `x`.
    pub fn omega_value(&self, fold: usize, x: &[f64]) -> f64 {
        match &self.fits[fold].omega {
            OmegaFit::Model(m) => m.predict(x),
            OmegaFit::Known(f) => f(x),
        }
    }

    fn rho_value(&self, model: &ProbabilityModel, input: &[f64]) -> f64 {
        clip(model.predict(input), self.eps(), 1.0 - self.eps())
    }

    fn check_folds(&self, ds: &TwoSampleDataset, folds: &FoldAssignment) -> Result<()> {
        if folds != &self.folds || ds.n() != self.folds.n() {
            return Err(Error::invalid("nuisances were fitted with a different fold assignment"));
        }
        Ok(())
    }

    fn values_impl(&self, ds: &TwoSampleDataset, arm: Arm, nos: bool) -> Result<NuisanceValues> {
        let n = ds.n();
        let jc = self.grid.len();
        let mut m = DMatrix::<f64>::zeros(n, jc);
        let mut g = DMatrix::<f64>::zeros(n, jc);
        let mut e = vec![0.0; n];
        let mut rho = vec![0.0; n];
        let mut omega = vec![0.0; n];
        for k in 0..self.folds.k() {
            let members = self.folds.members(k);
            let fit = &self.fits[k].arms[arm.index()];
            let nos_fit = if nos {
                Some(fit.nos.as_ref().ok_or_else(|| Error::invalid("no-surrogate models were not fitted"))?)
            } else {
                None
            };
            let g_bank = nos_fit.map_or(&fit.g, |f| &f.g);
            let xs = xs_of(ds, &members);
            let g_pred = g_bank.predict_rows(&xs);
            for (r, &i) in members.iter().enumerate() {
                g.row_mut(i).copy_from(&g_pred.row(r));
                omega[i] = self.omega_value(k, &xs[r]);
            }
            let arm_members: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| ds.get(i).as_source().is_some_and(|rec| rec.arm == arm))
                .collect();
            if !nos && !arm_members.is_empty() {
                let m_pred = fit.m.predict_rows(&xss_of(ds, &arm_members));
                for (r, &i) in arm_members.iter().enumerate() {
                    m.row_mut(i).copy_from(&m_pred.row(r));
                }
            }
            for &i in &members {
                if let Some(rec) = ds.get(i).as_source() {
                    e[i] = self.e_value(k, arm, &rec.x);
                    rho[i] = match nos_fit {
                        Some(f) => self.rho_value(&f.rho0, &rec.x),
                        None => self.rho_value(&fit.rho, &joined(&rec.x, &rec.s)),
                    };
                }
            }
        }
        if nos {
            m.copy_from(&g);
        }
        Ok(NuisanceValues {
            arm,
            grid: self.grid.clone(),
            m,
            g,
            e,
            rho,
            omega,
        })
    }

    /// Values for the no-surrogate benchmark: `m = g = g^nos`, `rho = rho^0(x)`.
    pub fn nos_values(&self, ds: &TwoSampleDataset, folds: &FoldAssignment, arm: Arm) -> Result<NuisanceValues> {
        self.check_folds(ds, folds)?;
        self.values_impl(ds, arm, true)
    }
}

impl Nuisances for FittedNuisances {
    fn grid(&self) -> &ThresholdGrid {
        &self.grid
    }

    fn values(&self, ds: &TwoSampleDataset, folds: &FoldAssignment, arm: Arm) -> Result<NuisanceValues> {
        self.check_folds(ds, folds)?;
        self.values_impl(ds, arm, false)
    }

    fn evaluate(&self, fold: usize, arm: Arm, y: f64, obs: &Observation) -> Result<NuisancePoint> {
        let j = self
            .grid
            .position(y)
            .ok_or_else(|| Error::invalid(format!("y = {y} is not a grid point")))?;
        if fold >= self.fits.len() {
            return Err(Error::invalid(format!("fold {fold} out of range")));
        }
        let fit = &self.fits[fold].arms[arm.index()];
        let x = obs.x().to_vec();
        let g = fit.g.predict_rows(std::slice::from_ref(&x))[(0, j)];
        let omega = self.omega_value(fold, &x);
        let (m, e, rho) = match obs.as_source() {
            Some(rec) => {
                let xs = joined(&rec.x, &rec.s);
                let m = (rec.arm == arm).then(|| fit.m.predict_rows(std::slice::from_ref(&xs))[(0, j)]);
                (m, Some(self.e_value(fold, arm, &rec.x)), Some(self.rho_value(&fit.rho, &xs)))
            }
            None => (None, None, None),
        };
        Ok(NuisancePoint { m, g, e, rho, omega })
    }
}

/// `m_a(y, x, s)`.
pub type OutcomeRegression = Arc<dyn Fn(Arm, f64, &[f64], &[f64]) -> f64 + Send + Sync>;
/// `g_a(y, x)`.
pub type MarginalRegression = Arc<dyn Fn(Arm, f64, &[f64]) -> f64 + Send + Sync>;
/// `e_a(x)`.
pub type ArmFunction = Arc<dyn Fn(Arm, &[f64]) -> f64 + Send + Sync>;
/// `rho_a(x, s)`.
pub type ValidationFunction = Arc<dyn Fn(Arm, &[f64], &[f64]) -> f64 + Send + Sync>;

/// Closed-form nuisances supplied by a data-generating process; passed
/// through unchanged except that `m` and `g` are clipped to `[0, 1]`.
#[derive(Clone)]
pub struct OracleNuisances {
    pub grid: ThresholdGrid,
    pub m: OutcomeRegression,
    pub g: MarginalRegression,
    pub e: ArmFunction,
    pub rho: ValidationFunction,
    pub omega: CovariateFn,
}

impl Nuisances for OracleNuisances {
    fn grid(&self) -> &ThresholdGrid {
        &self.grid
    }

    fn values(&self, ds: &TwoSampleDataset, _folds: &FoldAssignment, arm: Arm) -> Result<NuisanceValues> {
        let n = ds.n();
        let jc = self.grid.len();
        let pts = self.grid.points();
        let mut m = DMatrix::<f64>::zeros(n, jc);
        let mut g = DMatrix::<f64>::zeros(n, jc);
        let mut e = vec![0.0; n];
        let mut rho = vec![0.0; n];
        let mut omega = vec![0.0; n];
        for (i, obs) in ds.observations().iter().enumerate() {
            let x = obs.x();
            omega[i] = (self.omega)(x);
            for (j, &y) in pts.iter().enumerate() {
                g[(i, j)] = clip((self.g)(arm, y, x), 0.0, 1.0);
            }
            if let Some(rec) = obs.as_source() {
                e[i] = (self.e)(arm, x);
                rho[i] = (self.rho)(arm, x, &rec.s);
                if rec.arm == arm {
                    for (j, &y) in pts.iter().enumerate() {
                        m[(i, j)] = clip((self.m)(arm, y, x, &rec.s), 0.0, 1.0);
                    }
                }
            }
        }
        Ok(NuisanceValues {
            arm,
            grid: self.grid.clone(),
            m,
            g,
            e,
            rho,
            omega,
        })
    }

    fn evaluate(&self, _fold: usize, arm: Arm, y: f64, obs: &Observation) -> Result<NuisancePoint> {
        if self.grid.position(y).is_none() {
            return Err(Error::invalid(format!("y = {y} is not a grid point")));
        }
        let x = obs.x();
        let (m, e, rho) = match obs.as_source() {
            Some(rec) => (
                (rec.arm == arm).then(|| clip((self.m)(arm, y, x, &rec.s), 0.0, 1.0)),
                Some((self.e)(arm, x)),
                Some((self.rho)(arm, x, &rec.s)),
            ),
            None => (None, None, None),
        };
        Ok(NuisancePoint {
            m,
            g: clip((self.g)(arm, y, x), 0.0, 1.0),
            e,
            rho,
            omega: (self.omega)(x),
        })
    }
}

impl crate::oracle::DiscreteLaw {
    /// True nuisances of the law as pass-through callables. Covariate and
    /// surrogate values must lie on the law's supports.
    pub fn oracle_nuisances(&self, grid: &ThresholdGrid) -> OracleNuisances {
        let law = Arc::new(self.clone());
        let xi = |law: &crate::oracle::DiscreteLaw, x: &[f64]| law.x_index(x).expect("x on the law's support");
        let si = |law: &crate::oracle::DiscreteLaw, s: &[f64]| law.s_index(s).expect("s on the law's support");
        let (l1, l2, l3, l4, l5) = (law.clone(), law.clone(), law.clone(), law.clone(), law);
        OracleNuisances {
            grid: grid.clone(),
            m: Arc::new(move |a, y, x, s| l1.m(a, y, xi(&l1, x), si(&l1, s))),
            g: Arc::new(move |a, y, x| l2.g(a, y, xi(&l2, x))),
            e: Arc::new(move |a, x| l3.e(a, xi(&l3, x))),
            rho: Arc::new(move |a, x, s| l4.rho_at(a, xi(&l4, x), si(&l4, s))),
            omega: Arc::new(move |x| l5.omega(xi(&l5, x))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_folds;
    use crate::oracle::{DiscreteLaw, RandomLawOptions};

    fn small_dataset(seed: u64) -> TwoSampleDataset {
        let law = DiscreteLaw::random(seed, &RandomLawOptions::default());
        law.sample(400, seed).unwrap()
    }

    #[test]
    fn counts_models_per_fold_arm_and_threshold() {
        let ds = small_dataset(1);
        let folds = make_folds(&ds.strata(), 2, 3).unwrap();
        let grid = ThresholdGrid::new(vec![0.5, 1.5, 2.5]).unwrap();
        let fitted = fit_nuisances(&ds, &folds, &grid, &NuisanceConfig::default(), 9).unwrap();
        assert_eq!(fitted.m_model_count(), 2 * 2 * 3);
        assert_eq!(fitted.g_model_count(), 2 * 2 * 3);
    }

    #[test]
    fn range_invariants_and_training_normalization() {
        let ds = small_dataset(2);
        let folds = make_folds(&ds.strata(), 3, 4).unwrap();
        let grid = ThresholdGrid::new(vec![0.5, 1.5, 2.5, 3.5]).unwrap();
        let cfg = NuisanceConfig::default();
        let fitted = fit_nuisances(&ds, &folds, &grid, &cfg, 1).unwrap();
        for arm in Arm::BOTH {
            let v = fitted.values(&ds, &folds, arm).unwrap();
            assert!(v.m.iter().chain(v.g.iter()).all(|&u| (0.0..=1.0).contains(&u)));
            for i in 0..ds.n() {
                assert!(v.omega[i] >= cfg.epsilon && v.omega[i] <= 1.0 / cfg.epsilon);
                if ds.get(i).is_source() {
                    assert!(v.e[i] >= cfg.epsilon && v.e[i] <= 1.0 - cfg.epsilon);
                    assert!(v.rho[i] >= cfg.epsilon && v.rho[i] <= 1.0 - cfg.epsilon);
                }
            }
        }
        for k in 0..folds.k() {
            let train = folds.training(k);
            let src: Vec<f64> = train
                .iter()
                .filter(|&&i| ds.get(i).is_source())
                .map(|&i| fitted.omega_value(k, ds.get(i).x()))
                .collect();
            let mean = src.iter().sum::<f64>() / src.len() as f64;
            assert!((mean - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn oracle_pass_through_and_grid_check() {
        let law = DiscreteLaw::random(5, &RandomLawOptions::default());
        let ds = law.sample(50, 5).unwrap();
        let grid = ThresholdGrid::new(vec![0.5, 1.5]).unwrap();
        let oracle = law.oracle_nuisances(&grid);
        let obs = ds.observations().iter().find(|o| o.is_source()).unwrap();
        let rec = obs.as_source().unwrap();
        let pt = oracle.evaluate(0, rec.arm, 1.5, obs).unwrap();
        let (x, s) = (law.x_index(&rec.x).unwrap(), law.s_index(&rec.s).unwrap());
        assert_eq!(pt.m, Some(law.m(rec.arm, 1.5, x, s)));
        assert_eq!(pt.g, law.g(rec.arm, 1.5, x));
        assert_eq!(pt.omega, law.omega(x));
        assert!(oracle.evaluate(0, rec.arm, 1.0, obs).is_err());
    }

    #[test]
    fn empty_validation_stratum_names_fold_and_arm() {
        let ds = small_dataset(3);
        let folds = FoldAssignment::single(ds.n());
        let grid = ThresholdGrid::new(vec![0.5, 1.5]).unwrap();
        let cfg = NuisanceConfig {
            inner_folds: 100_000,
            ..Default::default()
        };
        let err = fit_nuisances(&ds, &folds, &grid, &cfg, 0).err().unwrap();
        assert!(err.to_string().contains("fold 1 arm"), "{err}");
    }
}
