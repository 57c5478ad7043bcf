//! Density-ratio estimators for `dP_{X,0} / dP_{X,1}`: a calibrated logistic
//! classifier and entropy balancing with an exponential-tilt extension.
//!
//! Both produce a raw ratio `r(x) > 0`. The fitted model evaluates
//! `clamp(c * r(x), eps, 1/eps)`, with the scale `c` chosen so that the mean
//! over the training source units is exactly one after truncation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::features::FeatureMap;
use super::logistic::{solve_logistic, LogisticModel};
use crate::error::{Error, Result};

pub const BALANCE_TOL: f64 = 1e-10;
pub const BALANCE_MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum RatioVariant {
    /// `r(x) = exp(eta(x)) * n1 / n0` where `eta` is the logit of `P(R=0|x)`.
    Classifier { model: LogisticModel, calibration: f64 },
    /// `r(x) = exp(theta' b(x) - log_normalizer)`.
    EntropyTilt {
        map: FeatureMap,
        theta: Vec<f64>,
        log_normalizer: f64,
        residual: f64,
        iterations: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRatioModel {
    pub variant: RatioVariant,
    pub epsilon: f64,
    /// Normalization constant applied before truncation.
    pub scale: f64,
}

impl DensityRatioModel {
    pub fn raw(&self, x: &[f64]) -> f64 {
        match &self.variant {
            RatioVariant::Classifier { model, calibration } => model.linear_predictor(x).exp() * calibration,
            RatioVariant::EntropyTilt {
                map,
                theta,
                log_normalizer,
                ..
            } => {
                let z = map.transform(x);
                let t: f64 = theta.iter().zip(&z).map(|(a, b)| a * b).sum();
                (t - log_normalizer).exp()
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        truncate(self.scale * self.raw(x), self.epsilon)
    }
}

fn truncate(v: f64, eps: f64) -> f64 {
    if v.is_nan() {
        return eps;
    }
    v.clamp(eps, 1.0 / eps)
}

/// Finds `c > 0` with `mean_i clamp(c * raw_i, eps, 1/eps) = 1`.
///
/// The left side is continuous and nondecreasing in `c`, piecewise linear in
/// the breakpoints `eps / raw_i` and `1 / (eps raw_i)`; the root is found by
/// bisection and then solved exactly on its linear piece.
pub fn truncated_normalizer(raw: &[f64], eps: f64) -> Result<f64> {
    if raw.is_empty() {
        return Err(Error::invalid("cannot normalize density ratios over an empty source sample"));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!("ratio truncation eps must lie in (0, 1), got {eps}")));
    }
    if raw.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::invalid("raw density ratios must be positive and finite"));
    }
    let n = raw.len() as f64;
    let mean_at = |c: f64| raw.iter().map(|&r| truncate(c * r, eps)).sum::<f64>() / n;
    let mean_raw = raw.iter().sum::<f64>() / n;
    let mut lo = 1.0 / mean_raw;
    let mut hi = lo;
    while mean_at(lo) > 1.0 {
        lo *= 0.5;
    }
    while mean_at(hi) < 1.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    // Exact solve on the linear piece containing the bracket.
    let mut c = 0.5 * (lo + hi);
    for _ in 0..8 {
        let (mut fixed, mut free) = (0.0, 0.0);
        for &r in raw {
            let v = c * r;
            if v <= eps {
                fixed += eps;
            } else if v >= 1.0 / eps {
                fixed += 1.0 / eps;
            } else {
                free += r;
            }
        }
        if free <= 0.0 {
            break;
        }
        let next = (n - fixed) / free;
        if !(next > 0.0) || next == c {
            break;
        }
        let same_piece = raw.iter().all(|&r| {
            let (a, b) = (c * r, next * r);
            (a <= eps) == (b <= eps) && (a >= 1.0 / eps) == (b >= 1.0 / eps)
        });
        if !same_piece {
            break;
        }
        c = next;
    }
    Ok(c)
}

/// Calibrated classifier ratio. `inputs` are all training units, `is_target`
/// flags `R = 0`; the ratio is normalized over the `R = 1` rows.
pub fn fit_classifier_ratio(
    map: &FeatureMap,
    inputs: &[Vec<f64>],
    is_target: &[bool],
    penalty: f64,
    epsilon: f64,
) -> Result<DensityRatioModel> {
    if inputs.len() != is_target.len() {
        return Err(Error::invalid("ratio inputs and sample labels differ in length"));
    }
    let n0 = is_target.iter().filter(|&&t| t).count();
    let n1 = is_target.len() - n0;
    if n0 == 0 || n1 == 0 {
        return Err(Error::invalid(format!(
            "classifier density ratio needs both samples (n0 = {n0}, n1 = {n1}); pi_hat_0 is degenerate"
        )));
    }
    let design = map.design(inputs.iter().map(Vec::as_slice));
    let labels: Vec<f64> = is_target.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let (coef, intercept, convergence) = solve_logistic(&design, &labels, penalty, None)?;
    let model = LogisticModel {
        map: map.clone(),
        coef,
        intercept,
        penalty,
        convergence,
    };
    let calibration = n1 as f64 / n0 as f64;
    let raw: Vec<f64> = (0..inputs.len())
        .filter(|&i| !is_target[i])
        .map(|i| {
            let eta = model.intercept + design.row(i).iter().zip(&model.coef).map(|(a, b)| a * b).sum::<f64>();
            eta.exp() * calibration
        })
        .collect();
    let scale = truncated_normalizer(&raw, epsilon)?;
    Ok(DensityRatioModel {
        variant: RatioVariant::Classifier { model, calibration },
        epsilon,
        scale,
    })
}

/// Result of entropy balancing on a training source sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyBalance {
    pub model: DensityRatioModel,
    /// Balancing weights on the fitting rows; positive and summing to one.
    pub weights: Vec<f64>,
}

/// Entropy balancing of the source rows `map(source_inputs)` to the target
/// feature means, solved through the dual
/// `theta -> log sum_i exp(theta' (b_i - target_means))` by Newton's method.
pub fn fit_entropy_balance(
    map: &FeatureMap,
    source_inputs: &[Vec<f64>],
    target_means: &[f64],
    epsilon: f64,
) -> Result<EntropyBalance> {
    let design = map.design(source_inputs.iter().map(Vec::as_slice));
    let (theta, weights, residual, iterations) = solve_entropy_dual(&design, target_means)?;
    let n1 = source_inputs.len() as f64;
    // omega_i = n1 w_i = exp(theta' b_i) / mean_j exp(theta' b_j)
    let scores: Vec<f64> = (0..design.nrows())
        .map(|i| design.row(i).iter().zip(&theta).map(|(a, b)| a * b).sum())
        .collect();
    let smax = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_normalizer = smax + (scores.iter().map(|s| (s - smax).exp()).sum::<f64>() / n1).ln();
    let raw: Vec<f64> = scores.iter().map(|s| (s - log_normalizer).exp()).collect();
    let scale = truncated_normalizer(&raw, epsilon)?;
    Ok(EntropyBalance {
        model: DensityRatioModel {
            variant: RatioVariant::EntropyTilt {
                map: map.clone(),
                theta,
                log_normalizer,
                residual,
                iterations,
            },
            epsilon,
            scale,
        },
        weights,
    })
}

/// Newton on the entropy-balancing dual for an explicit `n1 x d` design.
/// Returns `(theta, weights, residual inf-norm, iterations)`.
pub fn solve_entropy_dual(design: &DMatrix<f64>, target_means: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64, usize)> {
    let n = design.nrows();
    let d = design.ncols();
    if n == 0 {
        return Err(Error::invalid("entropy balancing needs at least one source row"));
    }
    if target_means.len() != d {
        return Err(Error::invalid(format!(
            "target means have length {} but features have dimension {d}",
            target_means.len()
        )));
    }
    let mut centered = design.clone();
    for j in 0..d {
        centered.column_mut(j).add_scalar_mut(-target_means[j]);
    }
    let dual = |theta: &DVector<f64>| -> (f64, DVector<f64>) {
        let s = &centered * theta;
        let smax = s.max();
        let e = s.map(|v| (v - smax).exp());
        let z = e.sum();
        (smax + z.ln(), e / z)
    };
    let residual_of = |w: &DVector<f64>| -> DVector<f64> { centered.tr_mul(w) };

    let mut theta = DVector::<f64>::zeros(d);
    let (mut obj, mut w) = dual(&theta);
    let mut resid = residual_of(&w);
    let mut iterations = 0;
    while resid.amax() > BALANCE_TOL && iterations < BALANCE_MAX_ITERATIONS {
        iterations += 1;
        // Hessian: weighted covariance of the centered features.
        let mut h = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let row = centered.row(i);
            for a in 0..d {
                let ra = row[a] * w[i];
                for b in a..d {
                    h[(a, b)] += ra * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        h -= &resid * resid.transpose();
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&resid),
            None => {
                let svd = h.svd(true, true);
                match svd.solve(&resid, 1e-14) {
                    Ok(s) => s,
                    Err(_) => resid.clone(),
                }
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta - &step * t;
            let (cand_obj, cand_w) = dual(&cand);
            if cand_obj.is_finite() && cand_obj <= obj + 1e-15 * obj.abs().max(1.0) {
                theta = cand;
                obj = cand_obj;
                w = cand_w;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        resid = residual_of(&w);
        if !accepted {
            break;
        }
    }
    let res_norm = resid.amax();
    if !(res_norm <= BALANCE_TOL) || theta.iter().any(|v| !v.is_finite()) {
        let (worst, _) = resid
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
        return Err(Error::BalanceInfeasible {
            constraint: worst,
            residual: res_norm,
            iterations,
        });
    }
    Ok((theta.iter().copied().collect(), w.iter().copied().collect(), res_norm, iterations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn balance_at_source_means_is_uniform() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 5.0]);
        let (theta, w, _, _) = solve_entropy_dual(&x, &[2.0]).unwrap();
        assert!(theta[0].abs() < 1e-12);
        for wi in w {
            assert!((wi - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn two_point_balance_is_forced() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let (theta, w, res, _) = solve_entropy_dual(&x, &[0.75]).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-10 && (w[1] - 0.75).abs() < 1e-10);
        assert!((theta[0] - 3f64.ln()).abs() < 1e-8);
        assert!(res <= 1e-10);
    }

    #[test]
    fn random_balance_satisfies_kkt() {
        let mut rng = rng_for(3, &[]);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let target = [0.3, -0.2, 0.1];
        let fit = fit_entropy_balance(&FeatureMap::raw(3), &rows, &target, 1e-3).unwrap();
        assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..3 {
            let m: f64 = rows.iter().zip(&fit.weights).map(|(r, w)| r[j] * w).sum();
            assert!((m - target[j]).abs() <= 1e-8);
        }
        assert!(fit.weights.iter().all(|&w| w > 0.0));
        // The tilt extension reproduces n1 w_i on the fitting rows.
        for (r, w) in rows.iter().zip(&fit.weights) {
            let omega = fit.model.predict(r);
            assert!((omega - 50.0 * w).abs() < 1e-9 * omega.max(1.0));
        }
    }

    #[test]
    fn infeasible_balance_names_a_constraint() {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        match solve_entropy_dual(&x, &[2.0, 0.5]) {
            Err(Error::BalanceInfeasible { constraint, .. }) => assert_eq!(constraint, 0),
            other => panic!("expected infeasible balance, got {other:?}"),
        }
    }

    #[test]
    fn normalizer_is_exact_under_truncation() {
        let raw = [0.001, 0.5, 1.0, 3.0, 400.0];
        let eps = 0.01;
        let c = truncated_normalizer(&raw, eps).unwrap();
        let mean: f64 = raw.iter().map(|r| (c * r).clamp(eps, 1.0 / eps)).sum::<f64>() / 5.0;
        assert!((mean - 1.0).abs() < 1e-12, "{mean}");
    }

    #[test]
    fn classifier_ratio_normalizes_and_truncates() {
        let mut rng = rng_for(8, &[]);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..400 {
            let t = i % 2 == 0;
            let shift = if t { 0.8 } else { 0.0 };
            inputs.push(vec![rng.sample::<f64, _>(StandardNormal) + shift]);
            labels.push(t);
        }
        let eps = 0.05;
        let m = fit_classifier_ratio(&FeatureMap::raw(1), &inputs, &labels, 1e-4, eps).unwrap();
        let src: Vec<f64> = inputs
            .iter()
            .zip(&labels)
            .filter(|(_, &t)| !t)
            .map(|(x, _)| m.predict(x))
            .collect();
        let mean = src.iter().sum::<f64>() / src.len() as f64;
        assert!((mean - 1.0).abs() < 1e-10);
        for x in [-10.0, 0.0, 10.0] {
            let v = m.predict(&[x]);
            assert!((eps..=1.0 / eps).contains(&v));
        }
    }

    #[test]
    fn classifier_ratio_rejects_single_sample() {
        let inputs = vec![vec![0.0], vec![1.0]];
        assert!(fit_classifier_ratio(&FeatureMap::raw(1), &inputs, &[false, false], 0.1, 0.01).is_err());
    }
}
