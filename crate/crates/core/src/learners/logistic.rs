//! Ridge logistic regression by damped Newton (IRLS).
//!
//! Minimizes the mean negative log-likelihood plus `(lambda/2)|theta|^2`; the
//! intercept is unpenalized. Labels may be fractional in `[0, 1]`, which keeps
//! the problem convex and lets the same solver fit generated responses.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::features::FeatureMap;
use crate::error::{Error, Result};

pub const GRADIENT_TOL: f64 = 1e-9;
pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub map: FeatureMap,
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub penalty: f64,
    pub convergence: Convergence,
}

impl LogisticModel {
    pub fn linear_predictor_features(&self, z: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict_proba_features(&self, z: &[f64]) -> f64 {
        expit(self.linear_predictor_features(z))
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.linear_predictor_features(&self.map.transform(x))
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        expit(self.linear_predictor(x))
    }
}

pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Raw solution `(coef, intercept, convergence)` on an explicit design.
pub fn solve_logistic(
    design: &DMatrix<f64>,
    labels: &[f64],
    penalty: f64,
    start: Option<(&[f64], f64)>,
) -> Result<(Vec<f64>, f64, Convergence)> {
    let n = design.nrows();
    let d = design.ncols();
    if n == 0 {
        return Err(Error::invalid("logistic regression needs at least one row"));
    }
    if labels.len() != n {
        return Err(Error::invalid("label length must match design rows"));
    }
    if labels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("logistic labels must lie in [0, 1]"));
    }
    if !(penalty >= 0.0) || !penalty.is_finite() {
        return Err(Error::invalid(format!("penalty must be finite and >= 0, got {penalty}")));
    }
    let ybar = labels.iter().sum::<f64>() / n as f64;
    if penalty == 0.0 && (ybar == 0.0 || ybar == 1.0) {
        return Err(Error::invalid(
            "all labels belong to one class and lambda = 0: the likelihood has no finite maximizer",
        ));
    }

    let y = DVector::from_column_slice(labels);
    // Parameters: theta (d) followed by the intercept.
    let mut beta = DVector::<f64>::zeros(d + 1);
    match start {
        Some((coef, b)) if coef.len() == d => {
            beta.rows_mut(0, d).copy_from_slice(coef);
            beta[d] = b;
        }
        _ => {
            let clipped = ybar.clamp(1e-6, 1.0 - 1e-6);
            beta[d] = (clipped / (1.0 - clipped)).ln();
        }
    }

    let objective = |eta: &DVector<f64>, beta: &DVector<f64>| -> f64 {
        let nll: f64 = eta.iter().zip(y.iter()).map(|(&t, &yy)| softplus(t) - yy * t).sum::<f64>() / n as f64;
        let pen: f64 = beta.rows(0, d).norm_squared() * penalty / 2.0;
        nll + pen
    };
    let predictor = |beta: &DVector<f64>| -> DVector<f64> { design * beta.rows(0, d) + DVector::from_element(n, beta[d]) };

    let mut eta = predictor(&beta);
    let mut obj = objective(&eta, &beta);
    let mut convergence = Convergence {
        iterations: 0,
        gradient_norm: f64::INFINITY,
        converged: false,
    };
    let mut hess = DMatrix::<f64>::zeros(d + 1, d + 1);
    for iter in 0..=MAX_ITERATIONS {
        let p = eta.map(expit);
        let resid = &p - &y;
        let mut grad = DVector::<f64>::zeros(d + 1);
        grad.rows_mut(0, d).copy_from(&(design.tr_mul(&resid) / n as f64 + beta.rows(0, d) * penalty));
        grad[d] = resid.sum() / n as f64;
        let gnorm = grad.amax();
        convergence.iterations = iter;
        convergence.gradient_norm = gnorm;
        if gnorm <= GRADIENT_TOL {
            convergence.converged = true;
            break;
        }
        if iter == MAX_ITERATIONS {
            break;
        }

        let w = p.map(|pi| (pi * (1.0 - pi)).max(1e-300));
        let nf = n as f64;
        let wsum = w.sum();
        for j in 0..d {
            let cj = design.column(j);
            let wx: Vec<f64> = cj.iter().zip(w.iter()).map(|(a, b)| a * b).collect();
            for k in j..d {
                let ck = design.column(k);
                let v = wx.iter().zip(ck.iter()).map(|(a, b)| a * b).sum::<f64>() / nf;
                hess[(j, k)] = v;
                hess[(k, j)] = v;
            }
            let cross = wx.iter().sum::<f64>() / nf;
            hess[(j, d)] = cross;
            hess[(d, j)] = cross;
            hess[(j, j)] += penalty;
        }
        hess[(d, d)] = wsum / nf;

        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                if penalty == 0.0 {
                    return Err(Error::Singular(
                        "logistic Hessian is singular with lambda = 0; use lambda > 0".into(),
                    ));
                }
                // Ridge keeps the penalized block positive definite; only the
                // intercept direction can degenerate, so fall back to gradient.
                grad.clone()
            }
        };

        // Inside the quadratic region the objective change drops below
        // rounding, so the line search can no longer rank candidates.
        if grad.dot(&step) < 1e-14 {
            beta -= &step;
            eta = predictor(&beta);
            obj = objective(&eta, &beta);
            continue;
        }
        // Damping: halve the step while the objective increases.
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta - &step * t;
            let cand_eta = predictor(&cand);
            let cand_obj = objective(&cand_eta, &cand);
            if cand_obj <= obj {
                beta = cand;
                eta = cand_eta;
                obj = cand_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No descent possible at working precision.
            convergence.iterations = iter + 1;
            convergence.converged = gnorm <= GRADIENT_TOL * 1e3;
            break;
        }
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logistic fit produced non-finite coefficients"));
    }
    Ok((beta.rows(0, d).iter().copied().collect(), beta[d], convergence))
}

/// Ridge logistic regression on an explicit feature matrix (raw map).
pub fn fit_ridge_logistic(features: &DMatrix<f64>, labels: &[f64], penalty: f64) -> Result<LogisticModel> {
    let (coef, intercept, convergence) = solve_logistic(features, labels, penalty, None)?;
    Ok(LogisticModel {
        map: FeatureMap::raw(features.ncols()),
        coef,
        intercept,
        penalty,
        convergence,
    })
}

/// Ridge logistic regression in `map(x)`.
pub fn fit_ridge_logistic_mapped(
    map: &FeatureMap,
    inputs: &[Vec<f64>],
    labels: &[f64],
    penalty: f64,
) -> Result<LogisticModel> {
    let design = map.design(inputs.iter().map(Vec::as_slice));
    let (coef, intercept, convergence) = solve_logistic(&design, labels, penalty, None)?;
    Ok(LogisticModel {
        map: map.clone(),
        coef,
        intercept,
        penalty,
        convergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn symmetric_design_gives_zero_solution() {
        let x = col(&[1.0, 1.0, -1.0, -1.0]);
        let m = fit_ridge_logistic(&x, &[1.0, 0.0, 1.0, 0.0], 0.1).unwrap();
        assert!(m.coef[0].abs() < 1e-12 && m.intercept.abs() < 1e-12);
        assert!(m.convergence.converged);
    }

    #[test]
    fn separated_data_stays_finite_under_ridge() {
        let x = col(&[-2.0, -1.0, 1.0, 2.0]);
        let m = fit_ridge_logistic(&x, &[0.0, 0.0, 1.0, 1.0], 1.0).unwrap();
        assert!(m.convergence.converged);
        let norm = (m.coef[0].powi(2) + m.intercept.powi(2)).sqrt();
        assert!(norm < 20.0);
    }

    #[test]
    fn one_class_without_penalty_is_rejected() {
        assert!(fit_ridge_logistic(&col(&[1.0, 2.0]), &[1.0, 1.0], 0.0).is_err());
        let m = fit_ridge_logistic(&col(&[1.0, 2.0]), &[1.0, 1.0], 0.5).unwrap();
        assert!(m.predict_proba_features(&[1.5]) > 0.999);
    }

    /// Independent dense Newton iteration written out for one feature plus
    /// intercept, run to 1e-12.
    fn newton_oracle(x: &[f64], y: &[f64], lambda: f64) -> (f64, f64) {
        let n = x.len() as f64;
        let (mut a, mut b) = (0.0f64, 0.0f64);
        for _ in 0..200 {
            let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (lambda * a, 0.0, lambda, 0.0, 0.0);
            for (&xi, &yi) in x.iter().zip(y) {
                let p = 1.0 / (1.0 + (-(a * xi + b)).exp());
                let w = p * (1.0 - p);
                ga += (p - yi) * xi / n;
                gb += (p - yi) / n;
                haa += w * xi * xi / n;
                hab += w * xi / n;
                hbb += w / n;
            }
            let det = haa * hbb - hab * hab;
            let da = (hbb * ga - hab * gb) / det;
            let db = (haa * gb - hab * ga) / det;
            a -= da;
            b -= db;
            if ga.abs().max(gb.abs()) < 1e-12 {
                break;
            }
        }
        (a, b)
    }

    #[test]
    fn matches_dense_newton_oracle() {
        let x = [0.3, -1.1, 2.0, 0.7];
        let y = [1.0, 0.0, 1.0, 0.0];
        let (a, b) = newton_oracle(&x, &y, 0.05);
        let m = fit_ridge_logistic(&col(&x), &y, 0.05).unwrap();
        assert!((m.coef[0] - a).abs() < 1e-8, "{} vs {a}", m.coef[0]);
        assert!((m.intercept - b).abs() < 1e-8);
    }

    #[test]
    fn constant_column_does_not_change_predictions() {
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let y: Vec<f64> = (0..30).map(|i| if (i * 7) % 5 < 2 { 1.0 } else { 0.0 }).collect();
        let base = fit_ridge_logistic(&col(&x), &y, 0.1).unwrap();
        let aug = DMatrix::from_fn(30, 2, |i, j| if j == 0 { x[i] } else { 1.0 });
        let wide = fit_ridge_logistic(&aug, &y, 0.1).unwrap();
        for &xi in &x {
            let p1 = base.predict_proba_features(&[xi]);
            let p2 = wide.predict_proba_features(&[xi, 1.0]);
            assert!((p1 - p2).abs() < 1e-6);
        }
    }

    #[test]
    fn warm_start_reaches_same_optimum() {
        let x = col(&[0.3, -1.1, 2.0, 0.7, 1.5]);
        let y = [1.0, 0.0, 1.0, 0.0, 1.0];
        let (c1, b1, _) = solve_logistic(&x, &y, 0.01, None).unwrap();
        let (c2, b2, conv) = solve_logistic(&x, &y, 0.01, Some((&[3.0], -2.0))).unwrap();
        assert!(conv.converged);
        assert!((c1[0] - c2[0]).abs() < 1e-8 && (b1 - b2).abs() < 1e-8);
    }
}
