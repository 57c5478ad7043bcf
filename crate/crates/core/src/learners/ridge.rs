//! Ridge least squares and finite-rank kernel ridge regression.
//!
//! Risks are normalized as sample averages, `(1/2n)|y - b - G theta|^2 +
//! (lambda/2)|theta|^2`, with the intercept `b` left unpenalized. The normal
//! equations are `(G_c^T G_c / n + lambda I) theta = G_c^T y_c / n` on
//! column-centered features.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::features::{median_bandwidth, FeatureMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub map: FeatureMap,
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub penalty: f64,
    /// Infinity norm of the normal-equation residual at the solution.
    pub gradient_norm: f64,
}

impl RidgeModel {
    pub fn predict_features(&self, z: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_features(&self.map.transform(x))
    }
}

/// A factorized ridge system that can be solved for many response vectors
/// sharing one design (one regression per outcome threshold).
pub struct RidgeSystem {
    centered: DMatrix<f64>,
    means: Vec<f64>,
    normal: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    penalty: f64,
    intercept: bool,
}

impl RidgeSystem {
    pub fn new(design: &DMatrix<f64>, penalty: f64, intercept: bool) -> Result<Self> {
        let n = design.nrows();
        let d = design.ncols();
        if n == 0 {
            return Err(Error::invalid("ridge regression needs at least one row"));
        }
        if !(penalty >= 0.0) || !penalty.is_finite() {
            return Err(Error::invalid(format!("ridge penalty must be finite and >= 0, got {penalty}")));
        }
        let means: Vec<f64> = if intercept {
            (0..d).map(|j| design.column(j).mean()).collect()
        } else {
            vec![0.0; d]
        };
        let mut centered = design.clone();
        for (j, mu) in means.iter().enumerate() {
            centered.column_mut(j).add_scalar_mut(-mu);
        }
        let mut normal = centered.tr_mul(&centered) / n as f64;
        for j in 0..d {
            normal[(j, j)] += penalty;
        }
        let chol = Cholesky::new(normal.clone()).ok_or_else(|| {
            Error::Singular(format!(
                "ridge normal equations are singular (d = {d}, n = {n}, lambda = {penalty}); use lambda > 0"
            ))
        })?;
        if penalty == 0.0 {
            let diag = chol.l_dirty().diagonal();
            let (lo, hi) = diag
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
            if lo <= hi * 1e-7 {
                return Err(Error::Singular(format!(
                    "ridge normal equations are numerically singular with lambda = 0 (d = {d}, n = {n}); use lambda > 0"
                )));
            }
        }
        Ok(RidgeSystem {
            centered,
            means,
            normal,
            chol,
            penalty,
            intercept,
        })
    }

    pub fn nrows(&self) -> usize {
        self.centered.nrows()
    }

    /// Returns `(coef, intercept, residual inf-norm)` for one response vector.
    pub fn solve(&self, responses: &[f64]) -> (Vec<f64>, f64, f64) {
        let n = self.centered.nrows();
        assert_eq!(responses.len(), n, "response length must match design rows");
        let ybar = if self.intercept {
            responses.iter().sum::<f64>() / n as f64
        } else {
            0.0
        };
        let yc = DVector::from_iterator(n, responses.iter().map(|v| v - ybar));
        let rhs = self.centered.tr_mul(&yc) / n as f64;
        let mut theta = self.chol.solve(&rhs);
        // One refinement step keeps the residual at rounding level.
        let resid = &rhs - &self.normal * &theta;
        theta += self.chol.solve(&resid);
        let final_resid = (&rhs - &self.normal * &theta).amax();
        let intercept = ybar - theta.iter().zip(&self.means).map(|(a, b)| a * b).sum::<f64>();
        (theta.iter().copied().collect(), intercept, final_resid)
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }
}

/// Ridge least squares on an explicit feature matrix.
pub fn fit_ridge(features: &DMatrix<f64>, responses: &[f64], penalty: f64, intercept: bool) -> Result<RidgeModel> {
    let system = RidgeSystem::new(features, penalty, intercept)?;
    let (coef, b, gradient_norm) = system.solve(responses);
    Ok(RidgeModel {
        map: FeatureMap::raw(features.ncols()),
        coef,
        intercept: b,
        penalty,
        gradient_norm,
    })
}

/// Ridge least squares in `map(x)`, with intercept.
pub fn fit_ridge_mapped(map: &FeatureMap, inputs: &[Vec<f64>], responses: &[f64], penalty: f64) -> Result<RidgeModel> {
    let design = map.design(inputs.iter().map(Vec::as_slice));
    let system = RidgeSystem::new(&design, penalty, true)?;
    let (coef, b, gradient_norm) = system.solve(responses);
    Ok(RidgeModel {
        map: map.clone(),
        coef,
        intercept: b,
        penalty,
        gradient_norm,
    })
}

/// Finite-rank Gaussian-kernel ridge regression through `rank` random
/// Fourier features. `bandwidth: None` uses the median heuristic.
pub fn fit_krr_rff(
    inputs: &[Vec<f64>],
    responses: &[f64],
    rank: usize,
    bandwidth: Option<f64>,
    penalty: f64,
    seed: u64,
) -> Result<RidgeModel> {
    let dim = inputs.first().map_or(0, Vec::len);
    let bw = bandwidth.unwrap_or_else(|| median_bandwidth(inputs));
    let map = FeatureMap::random_fourier(dim, rank, bw, seed)?;
    fit_ridge_mapped(&map, inputs, responses, penalty)
}
