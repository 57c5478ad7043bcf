//! Pointwise Wald inference, multiplier-bootstrap simultaneous QTE bands,
//! and overlap and efficiency diagnostics.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{fmt_real, Arm, TauGrid};
use crate::distribution::{Density, MonotoneCdf};
use crate::error::{Error, Result};
use crate::onestep::CdfEstimate;
use crate::oracle::DiscreteLaw;
use crate::seed::rng_for;

/// Two-sided standard normal critical value `z_{1 - alpha/2}`.
pub fn normal_critical(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(1.0 - alpha / 2.0))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Bandwidth for the density factors `f_a(q_a(tau))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BandwidthRule {
    /// `0.9 * IQR * n^(-1/5)` per arm, IQR read off that arm's CDF.
    #[default]
    Iqr,
    Fixed { h: f64 },
}

impl BandwidthRule {
    fn bandwidth(&self, cdf: &MonotoneCdf, n: usize) -> f64 {
        match *self {
            BandwidthRule::Iqr => cdf.default_bandwidth(n),
            BandwidthRule::Fixed { h } => h,
        }
    }
}

/// Pointwise Wald standard errors `sqrt(P_n phi^2 / n)` of a CDF estimate.
pub fn cdf_standard_errors(est: &CdfEstimate) -> Result<Vec<f64>> {
    let phi = est
        .influence
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{} carries no influence values", est.method)))?;
    Ok(column_second_moments(phi).into_iter().map(|m2| (m2 / phi.nrows() as f64).sqrt()).collect())
}

fn column_second_moments(phi: &DMatrix<f64>) -> Vec<f64> {
    let n = phi.nrows() as f64;
    phi.column_iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / n).collect()
}

/// Pointwise QTE inference.
#[derive(Debug, Clone, PartialEq)]
pub struct QteInference {
    pub taus: Vec<f64>,
    pub alpha: f64,
    pub q1: Vec<f64>,
    pub q0: Vec<f64>,
    pub delta: Vec<f64>,
    pub se: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// `n x L`: `-phi_1 / f_1 + phi_0 / f_0` at each level.
    pub influence: DMatrix<f64>,
    pub density1: Vec<Density>,
    pub density0: Vec<Density>,
    /// Either arm's quantile hit the top of the grid.
    pub saturated: Vec<bool>,
}

impl QteInference {
    pub fn n(&self) -> usize {
        self.influence.nrows()
    }

    /// A density floor was hit at this level, so its interval is unreliable.
    pub fn floored(&self, l: usize) -> bool {
        self.density1[l].floored || self.density0[l].floored
    }
}

/// Builds quantiles, the QTE influence matrix, standard errors and Wald
/// intervals. Each arm's CDF influence column is read at the grid point
/// nearest to that arm's estimated quantile.
pub fn qte_pointwise(
    cdf1: &CdfEstimate,
    cdf0: &CdfEstimate,
    f1: &MonotoneCdf,
    f0: &MonotoneCdf,
    taus: &TauGrid,
    alpha: f64,
    bandwidth: &BandwidthRule,
) -> Result<QteInference> {
    let z = normal_critical(alpha)?;
    if cdf1.arm != Arm::Treated || cdf0.arm != Arm::Control {
        return Err(Error::invalid("qte_pointwise expects the treated estimate first"));
    }
    let (Some(phi1), Some(phi0)) = (cdf1.influence.as_ref(), cdf0.influence.as_ref()) else {
        return Err(Error::invalid(format!(
            "quantile inference needs influence values ({} / {})",
            cdf1.method, cdf0.method
        )));
    };
    if phi1.nrows() != phi0.nrows() {
        return Err(Error::invalid("both arms must be estimated on the same sample"));
    }
    if f1.grid() != &cdf1.grid || f0.grid() != &cdf0.grid {
        return Err(Error::invalid("projected CDFs must share their estimate's grid"));
    }
    let n = phi1.nrows();
    let (h1, h0) = (bandwidth.bandwidth(f1, n), bandwidth.bandwidth(f0, n));
    let lv = taus.len();
    let mut out = QteInference {
        taus: taus.levels().to_vec(),
        alpha,
        q1: Vec::with_capacity(lv),
        q0: Vec::with_capacity(lv),
        delta: Vec::with_capacity(lv),
        se: Vec::with_capacity(lv),
        lo: Vec::with_capacity(lv),
        hi: Vec::with_capacity(lv),
        influence: DMatrix::zeros(n, lv),
        density1: Vec::with_capacity(lv),
        density0: Vec::with_capacity(lv),
        saturated: Vec::with_capacity(lv),
    };
    for (l, &tau) in taus.levels().iter().enumerate() {
        let (qa1, qa0) = (f1.quantile(tau), f0.quantile(tau));
        let (d1, d0) = (f1.density_at(qa1.value, h1)?, f0.density_at(qa0.value, h0)?);
        let (j1, j0) = (cdf1.grid.nearest(qa1.value), cdf0.grid.nearest(qa0.value));
        let mut m2 = 0.0;
        for i in 0..n {
            let v = -phi1[(i, j1)] / d1.value + phi0[(i, j0)] / d0.value;
            out.influence[(i, l)] = v;
            m2 += v * v;
        }
        let se = (m2 / n as f64 / n as f64).sqrt();
        let delta = qa1.value - qa0.value;
        out.q1.push(qa1.value);
        out.q0.push(qa0.value);
        out.delta.push(delta);
        out.se.push(se);
        out.lo.push(delta - z * se);
        out.hi.push(delta + z * se);
        out.density1.push(d1);
        out.density0.push(d0);
        out.saturated.push(qa1.saturated || qa0.saturated);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierKind {
    #[default]
    Gaussian,
    Rademacher,
    Mammen,
    /// All multipliers zero; only for testing the degenerate path.
    Zero,
}

impl MultiplierKind {
    fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            MultiplierKind::Gaussian => rng.sample(StandardNormal),
            MultiplierKind::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            MultiplierKind::Mammen => {
                let s5 = 5f64.sqrt();
                if rng.random::<f64>() < (s5 + 1.0) / (2.0 * s5) {
                    -(s5 - 1.0) / 2.0
                } else {
                    (s5 + 1.0) / 2.0
                }
            }
            MultiplierKind::Zero => 0.0,
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        match label {
            "gaussian" => Some(MultiplierKind::Gaussian),
            "rademacher" => Some(MultiplierKind::Rademacher),
            "mammen" => Some(MultiplierKind::Mammen),
            _ => None,
        }
    }
}

/// Simultaneous band over the tau grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimultaneousBand {
    pub alpha: f64,
    pub critical: f64,
    pub draws: usize,
    pub multiplier: MultiplierKind,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Levels left out of the sup because their standard error is zero.
    pub excluded: Vec<usize>,
    /// Sorted bootstrap sups.
    pub sups: Vec<f64>,
}

/// The `ceil((1 - alpha) B)`-th order statistic of the sups.
pub fn critical_value(sups: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if sups.is_empty() {
        return Err(Error::invalid("no bootstrap draws"));
    }
    let mut sorted = sups.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    let k = (((1.0 - alpha) * b as f64).ceil() as usize).clamp(1, b);
    Ok(sorted[k - 1])
}

const DRAW_BLOCK: usize = 64;

/// Studentized bootstrap sups `max_l |Z*_b(l)| / sd_l` over the usable
/// levels; draw `b` uses its own generator seeded from `(seed, b)`.
pub fn bootstrap_sups(
    influence: &DMatrix<f64>,
    draws: usize,
    seed: u64,
    multiplier: MultiplierKind,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = influence.nrows();
    if n == 0 {
        return Err(Error::invalid("empty influence matrix"));
    }
    let nf = n as f64;
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (l, col) in influence.column_iter().enumerate() {
        let mean = col.mean();
        let sd = (col.iter().map(|v| v * v).sum::<f64>() / nf).sqrt();
        if sd > 0.0 {
            kept.push((l, mean, sd));
        } else {
            excluded.push(l);
        }
    }
    if !excluded.is_empty() {
        log::warn!("{} tau level(s) with zero standard error left out of the band sup", excluded.len());
    }
    if kept.is_empty() {
        return Err(Error::invalid("every tau level has zero standard error"));
    }
    // Centered and studentized, with the 1/sqrt(n) folded in.
    let scaled = DMatrix::from_fn(n, kept.len(), |i, c| {
        let (l, mean, sd) = kept[c];
        (influence[(i, l)] - mean) / (sd * nf.sqrt())
    });
    let blocks: Vec<(usize, usize)> = (0..draws)
        .step_by(DRAW_BLOCK)
        .map(|b0| (b0, (b0 + DRAW_BLOCK).min(draws)))
        .collect();
    let sups: Vec<f64> = blocks
        .par_iter()
        .flat_map_iter(|&(b0, b1)| {
            let mut xi = DMatrix::<f64>::zeros(b1 - b0, n);
            for b in b0..b1 {
                let mut rng = rng_for(seed, &[b as u64]);
                for i in 0..n {
                    xi[(b - b0, i)] = multiplier.draw(&mut rng);
                }
            }
            let z = xi * &scaled;
            (0..z.nrows())
                .map(|r| z.row(r).iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok((sups, excluded))
}

pub fn multiplier_band(
    qte: &QteInference,
    draws: usize,
    alpha: f64,
    seed: u64,
    multiplier: MultiplierKind,
) -> Result<SimultaneousBand> {
    if draws < 100 {
        return Err(Error::invalid(format!("need at least 100 bootstrap draws, got {draws}")));
    }
    let (mut sups, excluded) = bootstrap_sups(&qte.influence, draws, seed, multiplier)?;
    let critical = critical_value(&sups, alpha)?;
    sups.sort_by(f64::total_cmp);
    Ok(SimultaneousBand {
        alpha,
        critical,
        draws,
        multiplier,
        lo: qte.delta.iter().zip(&qte.se).map(|(d, s)| d - critical * s).collect(),
        hi: qte.delta.iter().zip(&qte.se).map(|(d, s)| d + critical * s).collect(),
        excluded,
        sups,
    })
}

pub fn band_csv_string(qte: &QteInference, band: &SimultaneousBand) -> String {
    let mut out = String::from("tau,delta_hat,se,lo_pointwise,hi_pointwise,lo_simul,hi_simul,density_floor_flag\n");
    for l in 0..qte.taus.len() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            fmt_real(qte.taus[l]),
            fmt_real(qte.delta[l]),
            fmt_real(qte.se[l]),
            fmt_real(qte.lo[l]),
            fmt_real(qte.hi[l]),
            fmt_real(band.lo[l]),
            fmt_real(band.hi[l]),
            u8::from(qte.floored(l))
        ));
    }
    out
}

pub fn write_band_csv(path: impl AsRef<Path>, qte: &QteInference, band: &SimultaneousBand) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(band_csv_string(qte, band).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Effective sample size `(sum w)^2 / sum w^2`.
pub fn ess_omega(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::invalid("no weights"));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        return Err(Error::invalid("all weights are zero"));
    }
    Ok(s * s / s2)
}

/// `V_{a,0}(y) - V_a(y)`: closed form checked against enumeration.
pub fn efficiency_gain(law: &DiscreteLaw, arm: Arm, y: f64) -> Result<f64> {
    law.efficiency_gain(arm, y)
}

/// `sum_a gain_a(q_a(tau)) / f_a(q_a(tau))^2`.
pub fn quantile_gain(law: &DiscreteLaw, tau: f64) -> Result<f64> {
    law.quantile_gain(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ThresholdGrid;
    use crate::onestep::Method;
    use rand::SeedableRng;

    #[test]
    fn ess_examples() {
        assert_eq!(ess_omega(&[2.0; 7]).unwrap(), 7.0);
        assert_eq!(ess_omega(&[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!((ess_omega(&[1.0, 2.0]).unwrap() - 1.8).abs() < 1e-15);
        assert!(ess_omega(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn critical_value_is_an_order_statistic() {
        let sups: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(critical_value(&sups, 0.05).unwrap(), 95.0);
        assert_eq!(critical_value(&sups, 0.10).unwrap(), 90.0);
    }

    fn gaussian_influence(n: usize, l: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn zero_multipliers_collapse_the_band() {
        let phi = gaussian_influence(50, 3, 1);
        let (sups, _) = bootstrap_sups(&phi, 200, 4, MultiplierKind::Zero).unwrap();
        assert!(sups.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn mammen_moments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| MultiplierKind::Mammen.draw(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01 && (var - 1.0).abs() < 0.02, "{mean} {var}");
    }

    #[test]
    fn identical_arms_give_zero_effect() {
        let grid = ThresholdGrid::uniform(0.0, 1.0, 11).unwrap();
        let raw: Vec<f64> = grid.points().to_vec();
        let phi = gaussian_influence(30, 11, 2);
        let est = |arm| CdfEstimate {
            method: Method::Sa,
            arm,
            grid: grid.clone(),
            raw: raw.clone(),
            influence: Some(phi.clone()),
        };
        let f = MonotoneCdf::project(grid.clone(), &raw).unwrap();
        let taus = TauGrid::range(0.1, 0.9, 0.1).unwrap();
        let q = qte_pointwise(&est(Arm::Treated), &est(Arm::Control), &f, &f, &taus, 0.05, &BandwidthRule::Iqr).unwrap();
        assert!(q.delta.iter().all(|d| d.abs() < 1e-15));
        assert!(q.influence.iter().all(|v| v.abs() < 1e-15));
        assert!(q.se.iter().all(|&s| s < 1e-15));
    }
}
