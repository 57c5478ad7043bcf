//! Experiment configuration and its expansion into design cells.

use std::path::Path;

use serde::{Deserialize, Serialize};

use tqte::distribution::GridChoice;
use tqte::inference::{BandwidthRule, MultiplierKind};
use tqte::pipeline::NuisanceConfig;
use tqte::seed::derive_seed;
use tqte::TauGrid;

use crate::dgp::{DgpSpec, Treatment, Validation};
use crate::error::{SimError, SimResult};

/// Estimators a simulation can run on each replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "SA")]
    Sa,
    #[serde(rename = "NoS")]
    Nos,
    #[serde(rename = "IPW")]
    Ipw,
    Plugin,
    Source,
    Oracle,
    FullOracle,
    /// SA with the true density ratio in place of the fitted one.
    #[serde(rename = "SA_true_omega")]
    SaTrueOmega,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Estimator::Sa => "SA",
            Estimator::Nos => "NoS",
            Estimator::Ipw => "IPW",
            Estimator::Plugin => "Plugin",
            Estimator::Source => "Source",
            Estimator::Oracle => "Oracle",
            Estimator::FullOracle => "FullOracle",
            Estimator::SaTrueOmega => "SA_true_omega",
        }
    }

    pub fn has_influence(self) -> bool {
        !matches!(self, Estimator::Plugin | Estimator::Source)
    }

    pub fn needs_fit(self) -> bool {
        !matches!(self, Estimator::Oracle | Estimator::FullOracle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauRange {
    pub from: f64,
    pub to: f64,
    pub step: f64,
}

impl TauRange {
    pub fn grid(&self) -> SimResult<TauGrid> {
        Ok(TauGrid::range(self.from, self.to, self.step)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandConfig {
    pub taus: TauRange,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub multiplier: MultiplierKind,
}

fn default_draws() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub bandwidth: BandwidthRule,
    #[serde(default)]
    pub band: Option<BandConfig>,
}

fn default_alpha() -> f64 {
    0.05
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            alpha: default_alpha(),
            bandwidth: BandwidthRule::default(),
            band: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    #[serde(default = "default_truth_draws")]
    pub n_mc: usize,
    /// Defaults to a fixed stream derived from the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_truth_draws() -> usize {
    200_000
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig {
            n_mc: default_truth_draws(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(default = "default_theory_draws")]
    pub n_mc: usize,
}

fn default_theory_draws() -> usize {
    100_000
}

/// Design axes; an empty list leaves the base value in place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Axes {
    #[serde(default)]
    pub treatment: Vec<Treatment>,
    #[serde(default)]
    pub tilt: Vec<f64>,
    #[serde(default)]
    pub lambda_s: Vec<f64>,
    #[serde(default)]
    pub rho_bar: Vec<f64>,
    #[serde(default)]
    pub grid: Vec<GridChoice>,
    #[serde(default)]
    pub n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default)]
    pub description: String,
    pub dgp: DgpSpec,
    #[serde(default)]
    pub axes: Axes,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub taus: Vec<f64>,
    #[serde(default = "default_grid")]
    pub grid: GridChoice,
    pub methods: Vec<Estimator>,
    pub nuisance: NuisanceConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub truth: TruthConfig,
    #[serde(default)]
    pub theory: Option<TheoryConfig>,
}

fn default_folds() -> usize {
    5
}

fn default_grid() -> GridChoice {
    GridChoice::Fixed(101)
}

/// One point of the design grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    /// Position in the expanded design.
    pub index: usize,
    /// `name=value` pairs joined by `;`, or `base`.
    pub id: String,
    pub params: Vec<(String, String)>,
    pub dgp: DgpSpec,
    pub n: usize,
    pub grid: GridChoice,
}

impl Cell {
    /// Seed stream for this cell; depends on the id, not the position.
    pub fn key(&self) -> u64 {
        fnv1a(self.id.as_bytes())
    }

    pub fn param(&self, name: &str) -> Option<&str> {
        self.params.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    /// Filesystem-safe id.
    pub fn file_stem(&self) -> String {
        self.id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect()
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn num(v: f64) -> String {
    format!("{v}")
}

impl ExperimentConfig {
    pub fn from_json(text: &str, file: &str) -> SimResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| SimError::Config {
            file: file.to_string(),
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> SimResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> SimResult<()> {
        let bad = |m: String| Err(SimError::Spec(m));
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.n < 10 && self.axes.n.is_empty() {
            return bad(format!("n must be at least 10, got {}", self.n));
        }
        if self.axes.n.iter().any(|&n| n < 10) {
            return bad("every axes.n entry must be at least 10".into());
        }
        if self.folds == 0 {
            return bad("folds must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        TauGrid::new(self.taus.clone())?;
        if !(self.inference.alpha > 0.0 && self.inference.alpha < 1.0) {
            return bad("inference.alpha must lie in (0, 1)".into());
        }
        if let Some(band) = &self.inference.band {
            band.taus.grid()?;
            if band.draws < 100 {
                return bad("inference.band.draws must be at least 100".into());
            }
        }
        if self.axes.rho_bar.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return bad("axes.rho_bar entries must lie in (0, 1]".into());
        }
        if self.methods.contains(&Estimator::Nos) && self.nuisance.nos.is_none() {
            return bad("method NoS needs a `nuisance.nos` learner".into());
        }
        self.nuisance.validate()?;
        for cell in self.cells() {
            cell.dgp.validate(self.nuisance.epsilon).map_err(|e| match e {
                SimError::Spec(m) => SimError::Spec(format!("cell {}: {m}", cell.id)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Cartesian product of the axes in the order treatment, tilt,
    /// lambda_s, rho_bar, grid, n.
    pub fn cells(&self) -> Vec<Cell> {
        let base = Cell {
            index: 0,
            id: String::new(),
            params: Vec::new(),
            dgp: self.dgp.clone(),
            n: self.n,
            grid: self.grid,
        };
        let mut cells = vec![base];
        fn expand<T: Clone>(cells: Vec<Cell>, values: &[T], apply: impl Fn(&mut Cell, &T)) -> Vec<Cell> {
            if values.is_empty() {
                return cells;
            }
            let mut out = Vec::with_capacity(cells.len() * values.len());
            for c in &cells {
                for v in values {
                    let mut c2 = c.clone();
                    apply(&mut c2, v);
                    out.push(c2);
                }
            }
            out
        }
        let a = &self.axes;
        cells = expand(cells, &a.treatment, |c, t| {
            c.dgp.treatment = t.clone();
            c.params.push(("treatment".into(), t.label().into()));
        });
        cells = expand(cells, &a.tilt, |c, &t| {
            c.dgp.tilt = t;
            c.params.push(("tilt".into(), num(t)));
        });
        cells = expand(cells, &a.lambda_s, |c, &l| {
            c.dgp.lambda_s = l;
            c.params.push(("lambda_s".into(), num(l)));
        });
        cells = expand(cells, &a.rho_bar, |c, &r| {
            c.dgp.validation = Validation::Constant { value: r };
            c.params.push(("rho_bar".into(), num(r)));
        });
        cells = expand(cells, &a.grid, |c, &g| {
            c.grid = g;
            c.params.push(("grid".into(), g.label()));
        });
        cells = expand(cells, &a.n, |c, &n| {
            c.n = n;
            c.params.push(("n".into(), n.to_string()));
        });
        for (i, c) in cells.iter_mut().enumerate() {
            c.index = i;
            c.id = if c.params.is_empty() {
                "base".into()
            } else {
                c.params.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
            };
        }
        cells
    }

    pub fn truth_seed(&self) -> u64 {
        self.truth.seed.unwrap_or_else(|| derive_seed(self.seed, &[u64::MAX]))
    }

    /// Every tau the report needs truth at.
    pub fn truth_taus(&self) -> SimResult<Vec<f64>> {
        let mut taus = self.taus.clone();
        if let Some(band) = &self.inference.band {
            taus.extend_from_slice(band.taus.grid()?.levels());
        }
        taus.sort_by(f64::total_cmp);
        taus.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        Ok(taus)
    }
}
