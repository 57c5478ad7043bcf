//! Ground truth from a large target Monte Carlo sample with the surrogate
//! integrated out analytically: `Y^a | X ~ N(mu_a(X), s_a^2)`.

use std::io::Write;
use std::path::Path;

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use tqte::dataset::fmt_real;
use tqte::seed::rng_for;
use tqte::Arm;

use crate::dgp::DgpSpec;
use crate::error::{SimError, SimResult};

/// Below this Monte Carlo size the truth is flagged as noisy.
pub const MIN_TRUTH_DRAWS: usize = 100_000;

const QUANTILE_TOL: f64 = 1e-10;
const REFERENCE_POINTS: usize = 201;

/// Target-population CDF of one arm: an equal-weight normal mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureCdf {
    means: Vec<f64>,
    sd: f64,
    lo: f64,
    hi: f64,
}

impl MixtureCdf {
    fn new(means: Vec<f64>, sd: f64) -> Self {
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min) - 12.0 * sd;
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 12.0 * sd;
        MixtureCdf { means, sd, lo, hi }
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let nrm = Normal::new(0.0, 1.0).expect("standard normal");
        self.means.iter().map(|&m| nrm.cdf((y - m) / self.sd)).sum::<f64>() / self.means.len() as f64
    }

    pub fn density(&self, y: f64) -> f64 {
        let nrm = Normal::new(0.0, 1.0).expect("standard normal");
        self.means.iter().map(|&m| nrm.pdf((y - m) / self.sd)).sum::<f64>() / (self.means.len() as f64 * self.sd)
    }

    /// Safeguarded Newton on the mixture CDF, started at `start`.
    pub fn quantile_from(&self, tau: f64, start: f64) -> f64 {
        let (mut lo, mut hi) = (self.lo, self.hi);
        let mut y = start.clamp(lo, hi);
        for _ in 0..200 {
            let f = self.cdf(y) - tau;
            if f == 0.0 {
                return y;
            }
            if f < 0.0 {
                lo = y;
            } else {
                hi = y;
            }
            if hi - lo < QUANTILE_TOL {
                break;
            }
            let d = self.density(y);
            let newton = y - f / d;
            y = if d > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (f / d).abs() < QUANTILE_TOL * 0.1 {
                break;
            }
        }
        y
    }

    pub fn quantile(&self, tau: f64) -> f64 {
        let mean = self.means.iter().sum::<f64>() / self.means.len() as f64;
        self.quantile_from(tau, mean)
    }
}

/// True target CDFs, quantiles, QTEs and density factors.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTable {
    pub taus: Vec<f64>,
    /// `[control, treated]`.
    pub quantiles: [Vec<f64>; 2],
    pub delta: Vec<f64>,
    pub density: [Vec<f64>; 2],
    pub reference_grid: Vec<f64>,
    pub psi: [Vec<f64>; 2],
    /// `[min_a q_a(0.01), max_a q_a(0.99)]`: the simulation grid range.
    pub y_range: (f64, f64),
    pub n_mc: usize,
    pub seed: u64,
    pub cdfs: [MixtureCdf; 2],
}

pub fn compute_truth(spec: &DgpSpec, taus: &[f64], n_mc: usize, seed: u64) -> SimResult<TruthTable> {
    if n_mc == 0 {
        return Err(SimError::Spec("truth Monte Carlo size must be positive".into()));
    }
    if taus.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(SimError::Spec("truth tau levels must lie in (0, 1)".into()));
    }
    if n_mc < MIN_TRUTH_DRAWS {
        log::warn!("truth Monte Carlo size {n_mc} is below {MIN_TRUTH_DRAWS}; quantiles will be noisy");
    }
    let mut rng = rng_for(seed, &[]);
    let xs: Vec<Vec<f64>> = (0..n_mc).map(|_| spec.sample_x(&mut rng, true)).collect();
    let cdfs = Arm::BOTH.map(|arm| {
        let means = xs.iter().map(|x| spec.marginal_moments(arm, x).0).collect();
        MixtureCdf::new(means, spec.marginal_sd(arm))
    });
    let mut quantiles = [Vec::new(), Vec::new()];
    let mut density = [Vec::new(), Vec::new()];
    for arm in Arm::BOTH {
        let cdf = &cdfs[arm.index()];
        let mut start = cdf.quantile(0.5);
        let mut order: Vec<usize> = (0..taus.len()).collect();
        order.sort_by(|&a, &b| taus[a].total_cmp(&taus[b]));
        let mut q = vec![0.0; taus.len()];
        for l in order {
            q[l] = cdf.quantile_from(taus[l], start);
            start = q[l];
        }
        density[arm.index()] = q.iter().map(|&y| cdf.density(y)).collect();
        quantiles[arm.index()] = q;
    }
    let delta = quantiles[1].iter().zip(&quantiles[0]).map(|(a, b)| a - b).collect();
    let tail = |tau: f64| Arm::BOTH.map(|a| cdfs[a.index()].quantile(tau));
    let (q01, q99) = (tail(0.01), tail(0.99));
    let y_range = (q01[0].min(q01[1]), q99[0].max(q99[1]));
    let (r001, r999) = (tail(0.001), tail(0.999));
    let (rlo, rhi) = (r001[0].min(r001[1]), r999[0].max(r999[1]));
    let reference_grid: Vec<f64> = (0..REFERENCE_POINTS)
        .map(|j| rlo + (rhi - rlo) * j as f64 / (REFERENCE_POINTS - 1) as f64)
        .collect();
    let psi = Arm::BOTH.map(|a| reference_grid.iter().map(|&y| cdfs[a.index()].cdf(y)).collect());
    Ok(TruthTable {
        taus: taus.to_vec(),
        quantiles,
        delta,
        density,
        reference_grid,
        psi,
        y_range,
        n_mc,
        seed,
        cdfs,
    })
}

impl TruthTable {
    pub fn cdf(&self, arm: Arm) -> &MixtureCdf {
        &self.cdfs[arm.index()]
    }

    /// Long-format CSV: quantile rows then reference-grid CDF rows.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("kind,arm,x,value\n");
        for (l, &tau) in self.taus.iter().enumerate() {
            for arm in Arm::BOTH {
                out.push_str(&format!(
                    "quantile,{},{},{}\n",
                    arm.index(),
                    fmt_real(tau),
                    fmt_real(self.quantiles[arm.index()][l])
                ));
                out.push_str(&format!(
                    "density,{},{},{}\n",
                    arm.index(),
                    fmt_real(tau),
                    fmt_real(self.density[arm.index()][l])
                ));
            }
            out.push_str(&format!("delta,,{},{}\n", fmt_real(tau), fmt_real(self.delta[l])));
        }
        for arm in Arm::BOTH {
            for (y, v) in self.reference_grid.iter().zip(&self.psi[arm.index()]) {
                out.push_str(&format!("cdf,{},{},{}\n", arm.index(), fmt_real(*y), fmt_real(*v)));
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> SimResult<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
        f.write_all(self.to_csv_string().as_bytes()).map_err(|e| SimError::io(path, e))
    }
}
