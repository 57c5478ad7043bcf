//! Convex nuisance learners.

pub mod features;
pub mod logistic;
pub mod ratio;
pub mod ridge;

pub use features::{median_bandwidth, FeatureKind, FeatureMap, FeatureSpec};
pub use logistic::{expit, fit_ridge_logistic, fit_ridge_logistic_mapped, solve_logistic, Convergence, LogisticModel};
pub use ratio::{
    fit_classifier_ratio, fit_entropy_balance, solve_entropy_dual, truncated_normalizer, DensityRatioModel,
    EntropyBalance, RatioVariant,
};
pub use ridge::{fit_krr_rff, fit_ridge, fit_ridge_mapped, RidgeModel, RidgeSystem};

/// A fitted model with a raw real-valued prediction.
pub trait Predictor {
    fn predict_raw(&self, x: &[f64]) -> f64;
}

impl Predictor for RidgeModel {
    fn predict_raw(&self, x: &[f64]) -> f64 {
        self.predict(x)
    }
}

impl Predictor for LogisticModel {
    fn predict_raw(&self, x: &[f64]) -> f64 {
        self.predict_proba(x)
    }
}

impl Predictor for DensityRatioModel {
    fn predict_raw(&self, x: &[f64]) -> f64 {
        self.scale * self.raw(x)
    }
}

/// `clamp(v, lower, upper)`, mapping NaN to `lower`.
pub fn clip(v: f64, lower: f64, upper: f64) -> f64 {
    if v.is_nan() {
        lower
    } else {
        v.clamp(lower, upper)
    }
}

pub fn predict_clipped<P: Predictor + ?Sized>(model: &P, x: &[f64], lower: f64, upper: f64) -> f64 {
    clip(model.predict_raw(x), lower, upper)
}
