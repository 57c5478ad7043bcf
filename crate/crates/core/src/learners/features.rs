//! Bounded, deterministic feature maps shared by every nuisance learner.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Dimension-agnostic description of a feature map; materialized into a
/// [`FeatureMap`] once the input dimension is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSpec {
    Raw,
    /// Monomials up to `degree`; coordinate powers only unless `interactions`.
    Polynomial {
        degree: usize,
        #[serde(default)]
        interactions: bool,
    },
    /// Gaussian-kernel random Fourier features. `bandwidth: None` selects the
    /// median pairwise-distance heuristic at fit time.
    RandomFourier {
        rank: usize,
        #[serde(default)]
        bandwidth: Option<f64>,
    },
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec::Raw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Raw,
    Polynomial {
        degree: usize,
        /// Each monomial as a list of coordinate indices (with repetition).
        monomials: Vec<Vec<usize>>,
    },
    RandomFourier {
        rank: usize,
        bandwidth: f64,
        seed: u64,
        /// Row-major `rank x input_dim` frequency matrix.
        frequencies: Vec<f64>,
        phases: Vec<f64>,
    },
}

/// A materialized feature map `b: R^input_dim -> R^output_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    kind: FeatureKind,
    input_dim: usize,
    output_dim: usize,
}

impl FeatureMap {
    pub fn raw(input_dim: usize) -> Self {
        FeatureMap {
            kind: FeatureKind::Raw,
            input_dim,
            output_dim: input_dim,
        }
    }

    pub fn polynomial(input_dim: usize, degree: usize, interactions: bool) -> Result<Self> {
        if degree == 0 {
            return Err(Error::invalid("polynomial degree must be at least 1"));
        }
        let mut monomials = Vec::new();
        if interactions {
            // Nondecreasing index multisets of each size: all monomials of that degree.
            let mut frontier: Vec<Vec<usize>> = vec![vec![]];
            for _ in 0..degree {
                let mut next = Vec::new();
                for mono in &frontier {
                    let start = mono.last().copied().unwrap_or(0);
                    for j in start..input_dim {
                        let mut m = mono.clone();
                        m.push(j);
                        next.push(m);
                    }
                }
                monomials.extend(next.iter().cloned());
                frontier = next;
            }
            monomials.sort_by_key(Vec::len);
        } else {
            for power in 1..=degree {
                for j in 0..input_dim {
                    monomials.push(vec![j; power]);
                }
            }
        }
        let output_dim = monomials.len();
        Ok(FeatureMap {
            kind: FeatureKind::Polynomial { degree, monomials },
            input_dim,
            output_dim,
        })
    }

    /// `z(x) = sqrt(2/D) cos(W x + b)`, `W ~ N(0, bandwidth^-2 I)`,
    /// `b ~ U[0, 2 pi)`, drawn from the stream keyed by `seed`.
    pub fn random_fourier(input_dim: usize, rank: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("random feature rank must be at least 1"));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
        }
        let mut rng = rng_for(seed, &[0x0FF]);
        let frequencies: Vec<f64> = (0..rank * input_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) / bandwidth)
            .collect();
        let phases: Vec<f64> = (0..rank).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
        Ok(FeatureMap {
            kind: FeatureKind::RandomFourier {
                rank,
                bandwidth,
                seed,
                frequencies,
                phases,
            },
            input_dim,
            output_dim: rank,
        })
    }

    /// Materializes `spec` for inputs of dimension `input_dim`; `sample`
    /// supplies rows for the bandwidth heuristic.
    pub fn from_spec(spec: &FeatureSpec, input_dim: usize, seed: u64, sample: &[Vec<f64>]) -> Result<Self> {
        match *spec {
            FeatureSpec::Raw => Ok(FeatureMap::raw(input_dim)),
            FeatureSpec::Polynomial { degree, interactions } => {
                FeatureMap::polynomial(input_dim, degree, interactions)
            }
            FeatureSpec::RandomFourier { rank, bandwidth } => {
                let bw = match bandwidth {
                    Some(b) => b,
                    None => median_bandwidth(sample),
                };
                FeatureMap::random_fourier(input_dim, rank, bw, seed)
            }
        }
    }

    pub fn kind(&self) -> &FeatureKind {
        &self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Writes `b(x)` into `out` (length `output_dim`).
    pub fn transform_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input_dim);
        debug_assert_eq!(out.len(), self.output_dim);
        match &self.kind {
            FeatureKind::Raw => out.copy_from_slice(x),
            FeatureKind::Polynomial { monomials, .. } => {
                for (o, mono) in out.iter_mut().zip(monomials) {
                    *o = mono.iter().map(|&j| x[j]).product();
                }
            }
            FeatureKind::RandomFourier {
                rank,
                frequencies,
                phases,
                ..
            } => {
                let scale = (2.0 / *rank as f64).sqrt();
                for (r, o) in out.iter_mut().enumerate() {
                    let w = &frequencies[r * self.input_dim..(r + 1) * self.input_dim];
                    let arg: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + phases[r];
                    *o = scale * arg.cos();
                }
            }
        }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim];
        self.transform_into(x, &mut out);
        out
    }

    /// Stacks `b(x_i)` into an `n x output_dim` design matrix.
    pub fn design<'a, I>(&self, rows: I) -> DMatrix<f64>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mapped: Vec<Vec<f64>> = rows.into_iter().map(|x| self.transform(x)).collect();
        DMatrix::from_fn(mapped.len(), self.output_dim, |i, j| mapped[i][j])
    }
}

/// Median pairwise Euclidean distance over (at most the first 1000) rows.
pub fn median_bandwidth(rows: &[Vec<f64>]) -> f64 {
    let rows = &rows[..rows.len().min(1000)];
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let s: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}
