//! Two-sample observed data: target units contribute covariates only, source
//! units contribute treatment, surrogate, validation status and (when
//! validated) the primary outcome.
//!
//! Unobserved fields are absent rather than filled with placeholders, so a
//! formula that reads `y` of an unvalidated unit does not type-check.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Treatment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treated];

    pub fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Treated => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Arm> {
        match i {
            0 => Some(Arm::Control),
            1 => Some(Arm::Treated),
            _ => None,
        }
    }
}

/// Fields observed on a source-sample unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub x: Vec<f64>,
    pub arm: Arm,
    pub s: Vec<f64>,
    /// Primary outcome; present exactly when the unit is validated (M = 1).
    pub y: Option<f64>,
}

/// One observed unit `O = (R, X, R(A, S, M, MY))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Observation {
    Target { x: Vec<f64> },
    Source(SourceRecord),
}

impl Observation {
    pub fn target(x: Vec<f64>) -> Self {
        Observation::Target { x }
    }

    pub fn source(x: Vec<f64>, arm: Arm, s: Vec<f64>, y: Option<f64>) -> Self {
        Observation::Source(SourceRecord { x, arm, s, y })
    }

    pub fn x(&self) -> &[f64] {
        match self {
            Observation::Target { x } => x,
            Observation::Source(rec) => &rec.x,
        }
    }

    pub fn is_source(&self) -> bool {
        matches!(self, Observation::Source(_))
    }

    pub fn as_source(&self) -> Option<&SourceRecord> {
        match self {
            Observation::Source(rec) => Some(rec),
            Observation::Target { .. } => None,
        }
    }

    /// Sample indicator R (0 = target, 1 = source).
    pub fn r(&self) -> u8 {
        u8::from(self.is_source())
    }

    /// Validation indicator M; `None` for target units.
    pub fn m(&self) -> Option<bool> {
        self.as_source().map(|rec| rec.y.is_some())
    }

    pub fn stratum(&self) -> Stratum {
        match self {
            Observation::Target { .. } => Stratum::Target,
            Observation::Source(rec) => Stratum::Source {
                arm: rec.arm,
                validated: rec.y.is_some(),
            },
        }
    }
}

/// Fold-dealing stratum `(r, a, m)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stratum {
    Target,
    Source { arm: Arm, validated: bool },
}

impl Stratum {
    fn label(self) -> String {
        match self {
            Stratum::Target => "r=0".to_string(),
            Stratum::Source { arm, validated } => {
                format!("r=1,a={},m={}", arm.index(), u8::from(validated))
            }
        }
    }
}

/// A validated collection of observations with fixed covariate and surrogate
/// dimensions. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleDataset {
    observations: Vec<Observation>,
    p: usize,
    q: usize,
}

impl TwoSampleDataset {
    pub fn new(observations: Vec<Observation>, p: usize, q: usize) -> Result<Self> {
        for (i, obs) in observations.iter().enumerate() {
            check_observation(obs, p, q).map_err(|message| Error::Row { row: i + 1, message })?;
        }
        let ds = TwoSampleDataset { observations, p, q };
        if ds.n_target() == 0 || ds.n_source() == 0 {
            return Err(Error::invalid(format!(
                "dataset needs at least one target and one source unit (n0 = {}, n1 = {})",
                ds.n_target(),
                ds.n_source()
            )));
        }
        Ok(ds)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn get(&self, i: usize) -> &Observation {
        &self.observations[i]
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_target(&self) -> usize {
        self.observations.iter().filter(|o| !o.is_source()).count()
    }

    pub fn n_source(&self) -> usize {
        self.n() - self.n_target()
    }

    /// Empirical sample share `n_r / n`.
    pub fn pi_hat(&self, r: u8) -> f64 {
        let nr = if r == 0 { self.n_target() } else { self.n_source() };
        nr as f64 / self.n() as f64
    }

    pub fn strata(&self) -> Vec<Stratum> {
        self.observations.iter().map(Observation::stratum).collect()
    }

    /// Number of validated source units in `arm`.
    pub fn n_validated(&self, arm: Arm) -> usize {
        self.observations
            .iter()
            .filter_map(Observation::as_source)
            .filter(|rec| rec.arm == arm && rec.y.is_some())
            .count()
    }

    /// Validated outcomes across both arms, in observation order.
    pub fn validated_outcomes(&self) -> Vec<f64> {
        self.observations
            .iter()
            .filter_map(Observation::as_source)
            .filter_map(|rec| rec.y)
            .collect()
    }

    /// Reads the `r,a,m,y,x1..xp,s1..sq` CSV layout.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::Row { row: 1, message: e.to_string() })?
            .clone();
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        let (p, q) = parse_header(&names)?;
        let width = 4 + p + q;

        let mut observations = Vec::new();
        for (i, record) in reader.records().enumerate() {
            // Header is line 1; data rows are numbered from line 2.
            let row = i + 2;
            let record = record.map_err(|e| Error::Row { row, message: e.to_string() })?;
            let cells: Vec<&str> = record.iter().map(str::trim).collect();
            if cells.len() < width || cells[width..].iter().any(|c| !c.is_empty()) {
                return Err(Error::Row {
                    row,
                    message: format!("expected {width} cells, found {}", cells.len()),
                });
            }
            let obs = parse_row(&cells[..width], p, q).map_err(|message| Error::Row { row, message })?;
            check_observation(&obs, p, q).map_err(|message| Error::Row { row, message })?;
            observations.push(obs);
        }
        TwoSampleDataset::new(observations, p, q)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("r,a,m,y");
        for j in 1..=self.p {
            let _ = write!(out, ",x{j}");
        }
        for j in 1..=self.q {
            let _ = write!(out, ",s{j}");
        }
        out.push('\n');
        for obs in &self.observations {
            match obs {
                Observation::Target { x } => {
                    out.push_str("0,,,");
                    for v in x {
                        let _ = write!(out, ",{}", fmt_real(*v));
                    }
                    for _ in 0..self.q {
                        out.push(',');
                    }
                }
                Observation::Source(rec) => {
                    let _ = write!(out, "1,{},{},", rec.arm.index(), u8::from(rec.y.is_some()));
                    if let Some(y) = rec.y {
                        out.push_str(&fmt_real(y));
                    }
                    for v in rec.x.iter().chain(&rec.s) {
                        let _ = write!(out, ",{}", fmt_real(*v));
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Shortest decimal representation that parses back to the same `f64`
/// (at most 17 significant digits).
pub fn fmt_real(v: f64) -> String {
    format!("{v:?}")
}

fn parse_header(names: &[&str]) -> Result<(usize, usize)> {
    let bad = |msg: String| Error::Row { row: 1, message: msg };
    if names.len() < 5 || names[..4] != ["r", "a", "m", "y"] {
        return Err(bad("header must start with r,a,m,y followed by x1..xp".into()));
    }
    let mut p = 0;
    let mut q = 0;
    for name in &names[4..] {
        if name.is_empty() {
            continue;
        }
        let expected_x = format!("x{}", p + 1);
        let expected_s = format!("s{}", q + 1);
        if q == 0 && *name == expected_x {
            p += 1;
        } else if *name == expected_s {
            q += 1;
        } else {
            return Err(bad(format!("unexpected column `{name}` (expected `{expected_x}` or `{expected_s}`)")));
        }
    }
    if p == 0 {
        return Err(bad("at least one covariate column x1 is required".into()));
    }
    Ok((p, q))
}

fn parse_indicator(cell: &str, name: &str) -> std::result::Result<Option<bool>, String> {
    match cell {
        "" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(format!("{name} must be 0, 1 or empty, found `{other}`")),
    }
}

fn parse_real(cell: &str, name: &str) -> std::result::Result<Option<f64>, String> {
    if cell.is_empty() {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(format!("{name}: non-numeric value `{cell}`")),
    }
}

fn parse_row(cells: &[&str], p: usize, q: usize) -> std::result::Result<Observation, String> {
    let r = parse_indicator(cells[0], "r")?.ok_or("r must not be empty")?;
    let a = parse_indicator(cells[1], "a")?;
    let m = parse_indicator(cells[2], "m")?;
    let y = parse_real(cells[3], "y")?;
    let mut x = Vec::with_capacity(p);
    for j in 0..p {
        let name = format!("x{}", j + 1);
        x.push(parse_real(cells[4 + j], &name)?.ok_or(format!("{name} must not be empty"))?);
    }
    let s: Vec<Option<f64>> = (0..q)
        .map(|j| parse_real(cells[4 + p + j], &format!("s{}", j + 1)))
        .collect::<std::result::Result<_, _>>()?;

    if !r {
        if a.is_some() || m.is_some() || y.is_some() || s.iter().any(Option::is_some) {
            return Err("target row (r=0) must leave a, m, y and s empty".into());
        }
        return Ok(Observation::target(x));
    }
    let a = a.ok_or("source row (r=1) requires a")?;
    let m = m.ok_or("source row (r=1) requires m")?;
    let s: Vec<f64> = s
        .into_iter()
        .enumerate()
        .map(|(j, v)| v.ok_or(format!("source row requires s{}", j + 1)))
        .collect::<std::result::Result<_, _>>()?;
    match (m, y) {
        (true, None) => Err("validated row (m=1) requires y".into()),
        (false, Some(_)) => Err("y present with m=0".into()),
        _ => Ok(Observation::source(
            x,
            if a { Arm::Treated } else { Arm::Control },
            s,
            y,
        )),
    }
}

fn check_observation(obs: &Observation, p: usize, q: usize) -> std::result::Result<(), String> {
    if obs.x().len() != p {
        return Err(format!("x has length {}, expected {p}", obs.x().len()));
    }
    if obs.x().iter().any(|v| !v.is_finite()) {
        return Err("non-finite covariate".into());
    }
    if let Some(rec) = obs.as_source() {
        if rec.s.len() != q {
            return Err(format!("s has length {}, expected {q}", rec.s.len()));
        }
        if rec.s.iter().any(|v| !v.is_finite()) || rec.y.is_some_and(|y| !y.is_finite()) {
            return Err("non-finite surrogate or outcome".into());
        }
    }
    Ok(())
}

/// Partition of observation indices into `k` folds (indices `0..k`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    k: usize,
}

impl FoldAssignment {
    /// Wraps an explicit assignment, checking that every fold is nonempty.
    pub fn from_labels(fold_of: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("fold count must be at least 1"));
        }
        let mut sizes = vec![0usize; k];
        for &f in &fold_of {
            if f >= k {
                return Err(Error::invalid(format!("fold label {f} out of range 0..{k}")));
            }
            sizes[f] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!("fold {empty} is empty")));
        }
        Ok(FoldAssignment { fold_of, k })
    }

    /// Single fold holding every observation (no cross-fitting).
    pub fn single(n: usize) -> Self {
        FoldAssignment { fold_of: vec![0; n], k: 1 }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    pub fn fold_of(&self, i: usize) -> usize {
        self.fold_of[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    /// Indices outside `fold`. With a single fold every index is its own
    /// training set, which is the no-cross-fitting convention.
    pub fn training(&self, fold: usize) -> Vec<usize> {
        if self.k == 1 {
            return (0..self.n()).collect();
        }
        (0..self.n()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn for_dataset(ds: &TwoSampleDataset, k: usize, seed: u64) -> Result<Self> {
        make_folds(&ds.strata(), k, seed)
    }
}

/// Stratified random fold assignment.
///
/// Units are shuffled within each `(r, a, m)` stratum and dealt round-robin,
/// continuing the dealing position across strata so fold sizes stay balanced.
/// The target stratum and the validated stratum of each arm must hold at
/// least `k` units.
pub fn make_folds(strata: &[Stratum], k: usize, seed: u64) -> Result<FoldAssignment> {
    let n = strata.len();
    if k == 0 || n < k {
        return Err(Error::invalid(format!("need n >= K >= 1, got n = {n}, K = {k}")));
    }
    if k == 1 {
        return Ok(FoldAssignment::single(n));
    }
    let mut keys: Vec<Stratum> = strata.to_vec();
    keys.sort();
    keys.dedup();

    let required = [
        Stratum::Target,
        Stratum::Source { arm: Arm::Control, validated: true },
        Stratum::Source { arm: Arm::Treated, validated: true },
    ];
    for stratum in required {
        let available = strata.iter().filter(|&&s| s == stratum).count();
        if available < k {
            return Err(Error::Stratification {
                stratum: stratum.label(),
                available,
                required: k,
            });
        }
    }

    let mut fold_of = vec![0usize; n];
    let mut next = 0usize;
    for (si, key) in keys.iter().enumerate() {
        let mut members: Vec<usize> = (0..n).filter(|&i| strata[i] == *key).collect();
        let mut rng = rng_for(seed, &[0xF01D, si as u64]);
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    FoldAssignment::from_labels(fold_of, k)
}

/// Strictly increasing outcome thresholds `y_1 < ... < y_J`, `J >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdGrid(Vec<f64>);

impl ThresholdGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("threshold grid needs at least two points"));
        }
        if points.iter().any(|v| !v.is_finite()) || points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("threshold grid must be finite and strictly increasing"));
        }
        Ok(ThresholdGrid(points))
    }

    /// `j` equally spaced points spanning `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, j: usize) -> Result<Self> {
        if !(lo < hi) || j < 2 {
            return Err(Error::invalid(format!("uniform grid needs lo < hi and J >= 2 (lo={lo}, hi={hi}, J={j})")));
        }
        let step = (hi - lo) / (j - 1) as f64;
        let mut points: Vec<f64> = (0..j).map(|i| lo + step * i as f64).collect();
        points[j - 1] = hi;
        ThresholdGrid::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.0[0]
    }

    pub fn last(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    /// Largest distance from a point of `[y_1, y_J]` to its nearest grid point.
    pub fn mesh(&self) -> f64 {
        self.0.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max) / 2.0
    }

    /// Index of `y` if it is exactly a grid point.
    pub fn position(&self, y: f64) -> Option<usize> {
        self.0.binary_search_by(|p| p.total_cmp(&y)).ok()
    }

    /// Index of the grid point nearest to `y` (ties go to the lower point).
    pub fn nearest(&self, y: f64) -> usize {
        match self.0.binary_search_by(|p| p.total_cmp(&y)) {
            Ok(j) => j,
            Err(0) => 0,
            Err(j) if j == self.0.len() => j - 1,
            Err(j) => {
                if y - self.0[j - 1] <= self.0[j] - y {
                    j - 1
                } else {
                    j
                }
            }
        }
    }
}

impl TryFrom<Vec<f64>> for ThresholdGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ThresholdGrid::new(v)
    }
}

impl From<ThresholdGrid> for Vec<f64> {
    fn from(g: ThresholdGrid) -> Self {
        g.0
    }
}

/// Strictly increasing quantile levels in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TauGrid(Vec<f64>);

impl TauGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("tau grid must not be empty"));
        }
        if levels.iter().any(|&t| !(t > 0.0 && t < 1.0)) || levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("tau levels must be strictly increasing inside (0, 1)"));
        }
        Ok(TauGrid(levels))
    }

    /// `{from, from + step, ..., to}` with levels rounded to 1e-12 to avoid
    /// accumulated drift.
    pub fn range(from: f64, to: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::invalid("tau step must be positive"));
        }
        let count = ((to - from) / step + 1e-9).floor() as usize + 1;
        let levels = (0..count)
            .map(|i| ((from + step * i as f64) * 1e12).round() / 1e12)
            .collect();
        TauGrid::new(levels)
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for TauGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        TauGrid::new(v)
    }
}

impl From<TauGrid> for Vec<f64> {
    fn from(g: TauGrid) -> Self {
        g.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_row_csv() -> &'static str {
        "r,a,m,y,x1,s1\n0,,,,1.5,\n1,1,1,250,0.2,310\n"
    }

    #[test]
    fn parses_target_and_source_rows() {
        let ds = TwoSampleDataset::from_csv_str(two_row_csv()).unwrap();
        assert_eq!((ds.p(), ds.q()), (1, 1));
        assert_eq!(ds.get(0), &Observation::target(vec![1.5]));
        assert_eq!(
            ds.get(1),
            &Observation::source(vec![0.2], Arm::Treated, vec![310.0], Some(250.0))
        );
    }

    #[test]
    fn tolerates_trailing_empty_cell() {
        let ds = TwoSampleDataset::from_csv_str("r,a,m,y,x1,s1\n0,,,,1.5,,\n1,1,1,250,0.2,310\n").unwrap();
        assert_eq!(ds.n(), 2);
    }

    #[test]
    fn rejects_outcome_without_validation() {
        let err = TwoSampleDataset::from_csv_str("r,a,m,y,x1,s1\n0,,,,1.5,\n1,1,0,250,0.2,310\n").unwrap_err();
        match err {
            Error::Row { row, message } => {
                assert_eq!(row, 3);
                assert!(message.contains("m=0"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_target_row_with_treatment_and_bad_numbers() {
        let err = TwoSampleDataset::from_csv_str("r,a,m,y,x1,s1\n0,1,,,1.5,\n").unwrap_err();
        assert!(matches!(err, Error::Row { row: 2, .. }));
        let err = TwoSampleDataset::from_csv_str("r,a,m,y,x1,s1\n0,,,,abc,\n").unwrap_err();
        assert!(err.to_string().contains("non-numeric"));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = TwoSampleDataset::from_csv_str(two_row_csv()).unwrap();
        let back = TwoSampleDataset::from_csv_str(&ds.to_csv_string()).unwrap();
        assert_eq!(ds, back);
        let tricky = TwoSampleDataset::new(
            vec![
                Observation::target(vec![0.1 + 0.2, -1e-300]),
                Observation::source(vec![1.0 / 3.0, 7e22], Arm::Control, vec![], None),
            ],
            2,
            0,
        )
        .unwrap();
        assert_eq!(TwoSampleDataset::from_csv_str(&tricky.to_csv_string()).unwrap(), tricky);
    }

    #[test]
    fn empty_samples_are_rejected() {
        assert!(TwoSampleDataset::new(vec![Observation::target(vec![1.0])], 1, 0).is_err());
        assert!(TwoSampleDataset::from_csv_str("r,a,m,y,x1\n").is_err());
    }

    fn balanced_strata() -> Vec<Stratum> {
        let mut strata = vec![Stratum::Target; 4];
        for arm in Arm::BOTH {
            for _ in 0..2 {
                strata.push(Stratum::Source { arm, validated: true });
            }
        }
        strata
    }

    #[test]
    fn single_fold_holds_everything() {
        let folds = make_folds(&[Stratum::Target; 6], 1, 3).unwrap();
        assert_eq!(folds.labels(), &[0; 6]);
        assert_eq!(folds.training(0).len(), 6);
    }

    #[test]
    fn too_many_folds_is_an_error() {
        assert!(make_folds(&[Stratum::Target; 3], 5, 1).is_err());
    }

    #[test]
    fn stratified_folds_cover_every_required_stratum() {
        let strata = balanced_strata();
        for seed in 0..100u64 {
            let folds = make_folds(&strata, 2, seed).unwrap();
            for k in 0..2 {
                let members = folds.members(k);
                let targets = members.iter().filter(|&&i| strata[i] == Stratum::Target).count();
                assert_eq!(targets, 2);
                for arm in Arm::BOTH {
                    assert!(members
                        .iter()
                        .any(|&i| strata[i] == Stratum::Source { arm, validated: true }));
                }
            }
        }
        assert_eq!(make_folds(&strata, 2, 7).unwrap(), make_folds(&strata, 2, 7).unwrap());
    }

    #[test]
    fn infeasible_stratification_names_the_stratum() {
        let mut strata = balanced_strata();
        strata.retain(|s| *s != Stratum::Source { arm: Arm::Treated, validated: true });
        strata.push(Stratum::Source { arm: Arm::Treated, validated: true });
        let err = make_folds(&strata, 2, 1).unwrap_err();
        assert!(err.to_string().contains("r=1,a=1,m=1"), "{err}");
    }

    #[test]
    fn grids_validate_and_locate_points() {
        assert!(ThresholdGrid::new(vec![1.0]).is_err());
        assert!(ThresholdGrid::new(vec![1.0, 1.0]).is_err());
        let g = ThresholdGrid::uniform(0.0, 1.0, 5).unwrap();
        assert_eq!(g.points(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.position(0.5), Some(2));
        assert_eq!(g.position(0.3), None);
        assert_eq!(g.nearest(0.3), 1);
        assert_eq!(g.nearest(-3.0), 0);
        assert_eq!(g.nearest(9.0), 4);
        assert!((g.mesh() - 0.125).abs() < 1e-15);
        assert!(TauGrid::new(vec![0.0, 0.5]).is_err());
        let t = TauGrid::range(0.10, 0.90, 0.01).unwrap();
        assert_eq!(t.len(), 81);
        assert_eq!(t.levels()[80], 0.9);
    }
}
