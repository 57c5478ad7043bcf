//! Grids, box-constrained isotonic projection, piecewise-linear CDFs,
//! generalized-inverse quantiles and density factors.

use serde::{Deserialize, Serialize};

use crate::dataset::{TauGrid, ThresholdGrid};
use crate::error::{Error, Result};

/// `J_n = ceil(4 n^0.6)`.
pub fn growing_grid_size(n: usize) -> usize {
    (4.0 * (n as f64).powf(0.6)).ceil() as usize
}

/// Equally spaced grid of `growing_grid_size(n)` points spanning `[y_min, y_max]`.
pub fn growing_grid(n: usize, y_min: f64, y_max: f64) -> Result<ThresholdGrid> {
    ThresholdGrid::uniform(y_min, y_max, growing_grid_size(n).max(2))
}

/// Threshold grid rule: `fixed:J` equally spaced points or the growing rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GridChoice {
    Fixed(usize),
    Growing,
}

impl GridChoice {
    pub fn size(self, n: usize) -> usize {
        match self {
            GridChoice::Fixed(j) => j,
            GridChoice::Growing => growing_grid_size(n).max(2),
        }
    }

    pub fn build(self, n: usize, y_min: f64, y_max: f64) -> Result<ThresholdGrid> {
        ThresholdGrid::uniform(y_min, y_max, self.size(n))
    }

    /// Short label used in reports: `fixed101`, `growing`.
    pub fn label(self) -> String {
        match self {
            GridChoice::Fixed(j) => format!("fixed{j}"),
            GridChoice::Growing => "growing".into(),
        }
    }
}

impl std::str::FromStr for GridChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "growing" {
            return Ok(GridChoice::Growing);
        }
        let j = s
            .strip_prefix("fixed:")
            .and_then(|j| j.parse::<usize>().ok())
            .ok_or_else(|| Error::invalid(format!("grid must be `fixed:J` or `growing`, got `{s}`")))?;
        if j < 2 {
            return Err(Error::invalid(format!("fixed grid needs J >= 2, got {j}")));
        }
        Ok(GridChoice::Fixed(j))
    }
}

impl std::fmt::Display for GridChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GridChoice::Fixed(j) => write!(f, "fixed:{j}"),
            GridChoice::Growing => f.write_str("growing"),
        }
    }
}

impl TryFrom<String> for GridChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GridChoice> for String {
    fn from(g: GridChoice) -> String {
        g.to_string()
    }
}

/// Euclidean projection of `raw` onto `{f : f_1 <= ... <= f_J}` by pool
/// adjacent violators.
pub fn pava(raw: &[f64]) -> Vec<f64> {
    // Blocks as (sum, count), merged left while their means decrease.
    let mut sums: Vec<f64> = Vec::with_capacity(raw.len());
    let mut counts: Vec<usize> = Vec::with_capacity(raw.len());
    for &v in raw {
        sums.push(v);
        counts.push(1);
        while sums.len() > 1 {
            let k = sums.len() - 1;
            if sums[k - 1] * counts[k] as f64 > sums[k] * counts[k - 1] as f64 {
                sums[k - 1] += sums[k];
                counts[k - 1] += counts[k];
                sums.pop();
                counts.pop();
            } else {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(raw.len());
    for (s, c) in sums.iter().zip(&counts) {
        let mean = s / *c as f64;
        out.extend(std::iter::repeat(mean).take(*c));
    }
    out
}

/// Projection onto `{0 <= f_1 <= ... <= f_J <= 1}`: PAVA, then clamping.
pub fn pava_box_values(raw: &[f64]) -> Vec<f64> {
    pava(raw).into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

/// `max_j |raw_j - projected_j|`.
pub fn iso_distance(raw: &[f64], projected: &[f64]) -> f64 {
    raw.iter()
        .zip(projected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// A nondecreasing `[0, 1]`-valued function on a grid, interpolated linearly
/// and extended by constants outside `[y_1, y_J]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCdf {
    grid: ThresholdGrid,
    values: Vec<f64>,
    d_iso: f64,
}

/// A quantile together with its saturation flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantile {
    pub value: f64,
    /// `tau` exceeded `F(y_J)`; `value` is `y_J`.
    pub saturated: bool,
}

/// A density factor together with its floor flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub value: f64,
    pub floored: bool,
}

impl MonotoneCdf {
    /// Isotonic box projection of raw grid values.
    pub fn project(grid: ThresholdGrid, raw: &[f64]) -> Result<Self> {
        if raw.len() != grid.len() {
            return Err(Error::invalid(format!(
                "raw CDF has {} values for a grid of {} points",
                raw.len(),
                grid.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("raw CDF values must be finite"));
        }
        let values = pava_box_values(raw);
        let d_iso = iso_distance(raw, &values);
        Ok(MonotoneCdf { grid, values, d_iso })
    }

    /// Wraps values that already satisfy the monotone box constraints.
    pub fn from_monotone(grid: ThresholdGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid("CDF values and grid differ in length"));
        }
        let ok = values.iter().all(|v| (0.0..=1.0).contains(v)) && values.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(Error::invalid("values must be nondecreasing in [0, 1]"));
        }
        Ok(MonotoneCdf {
            grid,
            values,
            d_iso: 0.0,
        })
    }

    pub fn grid(&self) -> &ThresholdGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn d_iso(&self) -> f64 {
        self.d_iso
    }

    pub fn eval(&self, y: f64) -> f64 {
        let pts = self.grid.points();
        let j = pts.len();
        if y <= pts[0] {
            return self.values[0];
        }
        if y >= pts[j - 1] {
            return self.values[j - 1];
        }
        // pts[k-1] < y <= pts[k]
        let k = pts.partition_point(|&p| p < y);
        let (y0, y1) = (pts[k - 1], pts[k]);
        let (f0, f1) = (self.values[k - 1], self.values[k]);
        f0 + (f1 - f0) * (y - y0) / (y1 - y0)
    }

    /// Smallest `y` in `[y_1, y_J]` with `F(y) >= tau`.
    pub fn quantile(&self, tau: f64) -> Quantile {
        let pts = self.grid.points();
        let f = &self.values;
        let jmax = pts.len() - 1;
        if tau > f[jmax] {
            return Quantile {
                value: pts[jmax],
                saturated: true,
            };
        }
        let j = f.partition_point(|&v| v < tau);
        if j == 0 {
            return Quantile {
                value: pts[0],
                saturated: false,
            };
        }
        let (f0, f1) = (f[j - 1], f[j]);
        let t = ((tau - f0) / (f1 - f0)).clamp(0.0, 1.0);
        let value = pts[j - 1] + t * (pts[j] - pts[j - 1]);
        Quantile {
            value: value.min(pts[j]),
            saturated: false,
        }
    }

    /// Lower density guard `max(1e-3, 0.05 / (y_J - y_1))`.
    pub fn density_floor(&self) -> f64 {
        (0.05 / (self.grid.last() - self.grid.first())).max(1e-3)
    }

    /// Central difference `(F(q + h) - F(q - h)) / (2h)`, floored.
    pub fn density_at(&self, q: f64, h: f64) -> Result<Density> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::invalid(format!("density bandwidth must be positive, got {h}")));
        }
        let raw = (self.eval(q + h) - self.eval(q - h)) / (2.0 * h);
        let floor = self.density_floor();
        Ok(if raw < floor {
            Density {
                value: floor,
                floored: true,
            }
        } else {
            Density {
                value: raw,
                floored: false,
            }
        })
    }

    /// `0.9 * IQR * n^(-1/5)`, with the IQR read off this CDF; falls back to
    /// the grid spacing scale when the IQR vanishes.
    pub fn default_bandwidth(&self, n: usize) -> f64 {
        let iqr = self.quantile(0.75).value - self.quantile(0.25).value;
        let h = 0.9 * iqr * (n.max(1) as f64).powf(-0.2);
        if h > 0.0 {
            h
        } else {
            (self.grid.last() - self.grid.first()) / self.grid.len() as f64
        }
    }
}

/// Quantiles of one arm over a tau grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCurve {
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
    pub saturated: Vec<bool>,
}

impl QuantileCurve {
    pub fn from_cdf(cdf: &MonotoneCdf, taus: &TauGrid) -> Self {
        let qs: Vec<Quantile> = taus.levels().iter().map(|&t| cdf.quantile(t)).collect();
        QuantileCurve {
            taus: taus.levels().to_vec(),
            values: qs.iter().map(|q| q.value).collect(),
            saturated: qs.iter().map(|q| q.saturated).collect(),
        }
    }
}

/// `max_tau |Delta_grid(tau) - Delta(tau)|`, where `Delta_grid` inverts the
/// true CDFs restricted to `grid` with the same interpolation rules.
pub fn oracle_grid_error(
    cdf1: &dyn Fn(f64) -> f64,
    cdf0: &dyn Fn(f64) -> f64,
    grid: &ThresholdGrid,
    taus: &TauGrid,
    delta_true: &[f64],
) -> Result<f64> {
    if delta_true.len() != taus.len() {
        return Err(Error::invalid("true QTE vector must match the tau grid"));
    }
    let restrict = |cdf: &dyn Fn(f64) -> f64| -> Result<MonotoneCdf> {
        let raw: Vec<f64> = grid.points().iter().map(|&y| cdf(y)).collect();
        MonotoneCdf::project(grid.clone(), &raw)
    };
    let f1 = restrict(cdf1)?;
    let f0 = restrict(cdf0)?;
    Ok(taus
        .levels()
        .iter()
        .zip(delta_true)
        .map(|(&t, &d)| (f1.quantile(t).value - f0.quantile(t).value - d).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(growing_grid_size(2000), 383);
        assert_eq!(growing_grid_size(4000), 580);
        assert_eq!(growing_grid_size(8000), 879);
        let g = growing_grid(2000, -1.0, 1.0).unwrap();
        assert_eq!(g.len(), 383);
        assert_eq!(g.first(), -1.0);
        assert_eq!(g.last(), 1.0);
    }

    #[test]
    fn grid_choice_round_trip() {
        let g: GridChoice = "fixed:51".parse().unwrap();
        assert_eq!(g, GridChoice::Fixed(51));
        assert_eq!(g.to_string(), "fixed:51");
        assert_eq!("growing".parse::<GridChoice>().unwrap().size(4000), 580);
        assert!("fixed:1".parse::<GridChoice>().is_err());
        assert!("coarse".parse::<GridChoice>().is_err());
    }

    #[test]
    fn pava_examples() {
        assert!(close(&pava_box_values(&[0.3, 0.1]), &[0.2, 0.2]));
        assert!(close(&pava_box_values(&[0.1, 0.3, 0.2, 0.4]), &[0.1, 0.25, 0.25, 0.4]));
        assert!(close(&pava_box_values(&[-0.05, 0.5, 1.2]), &[0.0, 0.5, 1.0]));
        assert!((iso_distance(&[0.3, 0.1], &[0.2, 0.2]) - 0.1).abs() < 1e-15);
        assert_eq!(iso_distance(&[0.4], &[0.4]), 0.0);
    }

    fn grid(points: &[f64]) -> ThresholdGrid {
        ThresholdGrid::new(points.to_vec()).unwrap()
    }

    #[test]
    fn quantile_examples() {
        let f = MonotoneCdf::from_monotone(grid(&[0.0, 2.0]), vec![0.0, 1.0]).unwrap();
        assert_eq!(f.quantile(0.5).value, 1.0);
        let flat = MonotoneCdf::from_monotone(grid(&[0.0, 1.0, 2.0, 3.0]), vec![0.0, 0.5, 0.5, 1.0]).unwrap();
        assert_eq!(flat.quantile(0.5).value, 1.0);
        let sat = MonotoneCdf::from_monotone(grid(&[0.0, 1.0]), vec![0.1, 0.95]).unwrap();
        let q = sat.quantile(0.999);
        assert!(q.saturated && q.value == 1.0);
    }

    #[test]
    fn interpolation_and_extrapolation() {
        let f = MonotoneCdf::from_monotone(grid(&[0.0, 1.0, 3.0]), vec![0.2, 0.4, 0.8]).unwrap();
        assert_eq!(f.eval(-5.0), 0.2);
        assert_eq!(f.eval(9.0), 0.8);
        assert!((f.eval(2.0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn density_examples() {
        let f = MonotoneCdf::from_monotone(grid(&[0.0, 2.0]), vec![0.0, 1.0]).unwrap();
        let d = f.density_at(1.0, 0.3).unwrap();
        assert!((d.value - 0.5).abs() < 1e-14 && !d.floored);
        let flat = MonotoneCdf::from_monotone(grid(&[0.0, 1.0, 2.0, 3.0]), vec![0.0, 0.5, 0.5, 1.0]).unwrap();
        let d = flat.density_at(1.5, 0.2).unwrap();
        assert!(d.floored && d.value == flat.density_floor());
        assert!(f.density_at(1.0, 0.0).is_err());

        let normal = Normal::new(0.0, 1.0).unwrap();
        let g = ThresholdGrid::uniform(-5.0, 5.0, 2001).unwrap();
        let vals: Vec<f64> = g.points().iter().map(|&y| normal.cdf(y)).collect();
        let cdf = MonotoneCdf::project(g, &vals).unwrap();
        let d = cdf.density_at(0.0, 0.1).unwrap();
        assert!((d.value - 0.398_942_280_4).abs() < 1e-3, "{}", d.value);
    }

    #[test]
    fn oracle_grid_error_vanishes_on_exact_grid() {
        // Piecewise-linear truths whose kinks and quantiles lie on the grid.
        let f1 = |y: f64| (y / 2.0).clamp(0.0, 1.0);
        let f0 = |y: f64| ((y - 0.5) / 2.0).clamp(0.0, 1.0);
        let g = ThresholdGrid::uniform(0.0, 2.5, 11).unwrap();
        let taus = TauGrid::new(vec![0.25, 0.5, 0.75]).unwrap();
        let err = oracle_grid_error(&f1, &f0, &g, &taus, &[-0.5, -0.5, -0.5]).unwrap();
        assert!(err < 1e-12);
    }
}
