//! Confounding-function priors, sensitivity draws, the multi-treatment bias
//! formula and the adjusted outcome.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::dataset::{ObservationalDataset, TreatmentPair};
use crate::linalg::{self, LinalgError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfoundingError {
    #[error("prior for c({j},{l}): {message}")]
    InvalidPrior { j: usize, l: usize, message: String },
    #[error("invalid prior: {0}")]
    Prior(String),
    #[error("pair ({0},{1}) is not a valid ordered pair of distinct arms")]
    BadPair(usize, usize),
    #[error("GPS row is not a simplex (sum {sum}, min {min})")]
    NotSimplex { sum: f64, min: f64 },
    #[error("stratified prior on column {column}: no entry for observed value {value}")]
    UncoveredStratum { column: usize, value: f64 },
    #[error("stratified prior on column {column}: column is not discrete")]
    ContinuousStratifier { column: usize },
    #[error("need n > p + J + 1 for the residual SD (n={n}, p={p}, J={j})")]
    TooFewUnits { n: usize, p: usize, j: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Prior on one confounding function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum PriorSpec {
    #[serde(rename = "point")]
    PointMass { value: f64 },
    Uniform { lo: f64, hi: f64 },
    #[serde(rename = "truncnormal")]
    TruncNormal { center: f64, spread: f64, lo: f64, hi: f64 },
    /// Separate prior per value of one discrete covariate column.
    Stratified { column: usize, strata: BTreeMap<i64, PriorSpec> },
}

fn in_bounds(v: f64) -> bool {
    v.is_finite() && (-1.0..=1.0).contains(&v)
}

impl PriorSpec {
    pub fn point(value: f64) -> Self {
        PriorSpec::PointMass { value }
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        PriorSpec::Uniform { lo, hi }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.validate_inner(0)
    }

    fn validate_inner(&self, depth: usize) -> Result<(), String> {
        match *self {
            PriorSpec::PointMass { value } => {
                if !in_bounds(value) {
                    return Err(format!("point value {value} outside the natural bounds [-1, 1]"));
                }
            }
            PriorSpec::Uniform { lo, hi } => {
                if !in_bounds(lo) || !in_bounds(hi) {
                    return Err(format!("uniform support [{lo}, {hi}] outside the natural bounds [-1, 1]"));
                }
                if lo > hi {
                    return Err(format!("uniform lo {lo} exceeds hi {hi}"));
                }
            }
            PriorSpec::TruncNormal { center, spread, lo, hi } => {
                if !in_bounds(lo) || !in_bounds(hi) {
                    return Err(format!("truncated-normal support [{lo}, {hi}] outside the natural bounds [-1, 1]"));
                }
                if lo > hi {
                    return Err(format!("truncated-normal lo {lo} exceeds hi {hi}"));
                }
                if !(spread > 0.0 && spread.is_finite()) || !center.is_finite() {
                    return Err(format!("truncated-normal spread must be positive, got {spread}"));
                }
            }
            PriorSpec::Stratified { ref strata, .. } => {
                if depth > 0 {
                    return Err("stratified priors cannot be nested".into());
                }
                if strata.is_empty() {
                    return Err("stratified prior has no strata".into());
                }
                for p in strata.values() {
                    p.validate_inner(depth + 1)?;
                }
            }
        }
        Ok(())
    }

    /// Support `[lo, hi]` of a non-stratified prior.
    pub fn support(&self) -> Option<(f64, f64)> {
        match *self {
            PriorSpec::PointMass { value } => Some((value, value)),
            PriorSpec::Uniform { lo, hi } | PriorSpec::TruncNormal { lo, hi, .. } => Some((lo, hi)),
            PriorSpec::Stratified { .. } => None,
        }
    }

    /// Prior quantile at `u`; every scalar prior consumes exactly one uniform.
    fn quantile(&self, u: f64) -> f64 {
        match *self {
            PriorSpec::PointMass { value } => value,
            PriorSpec::Uniform { lo, hi } => lo + u * (hi - lo),
            PriorSpec::TruncNormal { center, spread, lo, hi } => trunc_normal_quantile(center, spread, lo, hi, u),
            PriorSpec::Stratified { .. } => unreachable!("stratified priors are expanded per stratum"),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> CValue {
        match self {
            PriorSpec::Stratified { column, strata } => CValue::Stratified {
                column: *column,
                values: strata.iter().map(|(&key, p)| (key, p.quantile(rng.random::<f64>()))).collect(),
            },
            scalar => CValue::Constant(scalar.quantile(rng.random::<f64>())),
        }
    }
}

fn trunc_normal_quantile(center: f64, spread: f64, lo: f64, hi: f64, u: f64) -> f64 {
    let std = Normal::standard();
    let za = (lo - center) / spread;
    let zb = (hi - center) / spread;
    // Work in the lower tail, where the CDF keeps its precision.
    let (a, b, flip) = if za > 0.0 { (-zb, -za, true) } else { (za, zb, false) };
    let fa = std.cdf(a);
    let fb = std.cdf(b);
    let z = if fb - fa > 1e-300 {
        std.inverse_cdf(fa + u * (fb - fa)).clamp(a, b)
    } else {
        a + u * (b - a)
    };
    let z = if flip { -z } else { z };
    (center + spread * z).clamp(lo, hi)
}

/// Priors for every ordered pair; unlisted pairs are a point mass at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfoundingSpec {
    n_arms: usize,
    priors: BTreeMap<(usize, usize), PriorSpec>,
}

const ZERO: PriorSpec = PriorSpec::PointMass { value: 0.0 };

impl ConfoundingSpec {
    pub fn new(n_arms: usize) -> Self {
        ConfoundingSpec { n_arms, priors: BTreeMap::new() }
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn set(&mut self, j: usize, l: usize, prior: PriorSpec) -> Result<(), ConfoundingError> {
        if j == l || j == 0 || l == 0 || j > self.n_arms || l > self.n_arms {
            return Err(ConfoundingError::BadPair(j, l));
        }
        prior.validate().map_err(|message| ConfoundingError::InvalidPrior { j, l, message })?;
        self.priors.insert((j, l), prior);
        Ok(())
    }

    pub fn with(mut self, j: usize, l: usize, prior: PriorSpec) -> Result<Self, ConfoundingError> {
        self.set(j, l, prior)?;
        Ok(self)
    }

    pub fn get(&self, j: usize, l: usize) -> &PriorSpec {
        self.priors.get(&(j, l)).unwrap_or(&ZERO)
    }

    /// Explicitly listed entries.
    pub fn entries(&self) -> impl Iterator<Item = (&(usize, usize), &PriorSpec)> {
        self.priors.iter()
    }

    /// Ordered pairs (j, l), j != l, in lexicographic order.
    pub fn ordered_pairs(&self) -> Vec<(usize, usize)> {
        let j = self.n_arms;
        (1..=j).flat_map(|a| (1..=j).filter(move |&b| b != a).map(move |b| (a, b))).collect()
    }

    pub fn validate(&self) -> Result<(), ConfoundingError> {
        for (&(j, l), p) in &self.priors {
            if j == l || j == 0 || l == 0 || j > self.n_arms || l > self.n_arms {
                return Err(ConfoundingError::BadPair(j, l));
            }
            p.validate().map_err(|message| ConfoundingError::InvalidPrior { j, l, message })?;
        }
        Ok(())
    }

    /// Checks stratified priors against the data: discrete column, every
    /// observed value covered.
    pub fn check_against(&self, ds: &ObservationalDataset) -> Result<(), ConfoundingError> {
        self.validate()?;
        if ds.n_arms() != self.n_arms {
            return Err(ConfoundingError::Prior(format!(
                "spec is for {} arms, data has {}",
                self.n_arms,
                ds.n_arms()
            )));
        }
        for p in self.priors.values() {
            if let PriorSpec::Stratified { column, strata } = p {
                let meta = ds.columns().get(*column).ok_or_else(|| {
                    ConfoundingError::Prior(format!("stratifying column {column} does not exist"))
                })?;
                if !meta.kind.is_discrete() {
                    return Err(ConfoundingError::ContinuousStratifier { column: *column });
                }
                for i in 0..ds.n() {
                    let v = ds.value(i, *column);
                    if !strata.contains_key(&stratum_key(v)) {
                        return Err(ConfoundingError::UncoveredStratum { column: *column, value: v });
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn stratum_key(v: f64) -> i64 {
    v.round() as i64
}

/// A realized confounding function: constant or constant within strata.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CValue {
    Constant(f64),
    Stratified { column: usize, values: BTreeMap<i64, f64> },
}

impl CValue {
    pub fn at(&self, x: &[f64]) -> f64 {
        match self {
            CValue::Constant(v) => *v,
            CValue::Stratified { column, values } => values.get(&stratum_key(x[*column])).copied().unwrap_or(f64::NAN),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            CValue::Constant(v) => vec![*v],
            CValue::Stratified { values, .. } => values.values().copied().collect(),
        }
    }
}

/// One joint draw of every c(j, l).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityDraw {
    n_arms: usize,
    /// Row-major J×J; the diagonal is `Constant(0)`.
    values: Vec<CValue>,
}

impl SensitivityDraw {
    pub fn get(&self, j: usize, l: usize) -> &CValue {
        &self.values[(j - 1) * self.n_arms + (l - 1)]
    }

    pub fn at(&self, x: &[f64]) -> CMatrix {
        CMatrix { n_arms: self.n_arms, values: self.values.iter().map(|c| c.at(x)).collect() }
    }
}

pub type SensitivityDrawSet = Vec<SensitivityDraw>;

/// c(j, l) evaluated at one covariate vector, row-major J×J.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    n_arms: usize,
    values: Vec<f64>,
}

impl CMatrix {
    pub fn zeros(n_arms: usize) -> Self {
        CMatrix { n_arms, values: vec![0.0; n_arms * n_arms] }
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn get(&self, j: usize, l: usize) -> f64 {
        self.values[(j - 1) * self.n_arms + (l - 1)]
    }

    pub fn set(&mut self, j: usize, l: usize, v: f64) {
        self.values[(j - 1) * self.n_arms + (l - 1)] = v;
    }

    pub fn with(mut self, j: usize, l: usize, v: f64) -> Self {
        self.set(j, l, v);
        self
    }
}

/// Draws `m2_count` independent joint draws. Each ordered pair takes its own
/// child stream per draw, so changing one pair's prior never moves another's
/// draws and scalar priors are quantile-coupled across nested families.
pub fn sample_c(spec: &ConfoundingSpec, m2_count: usize, rng: &mut ChaCha8Rng) -> Result<SensitivityDrawSet, ConfoundingError> {
    spec.validate()?;
    let j = spec.n_arms;
    let mut out = Vec::with_capacity(m2_count);
    for _ in 0..m2_count {
        let mut values = Vec::with_capacity(j * j);
        for a in 1..=j {
            for l in 1..=j {
                let seed: u64 = rng.random();
                if a == l {
                    values.push(CValue::Constant(0.0));
                } else {
                    let mut child = ChaCha8Rng::seed_from_u64(seed);
                    values.push(spec.get(a, l).draw(&mut child));
                }
            }
        }
        out.push(SensitivityDraw { n_arms: j, values });
    }
    Ok(out)
}

fn check_simplex(p: &[f64]) -> Result<(), ConfoundingError> {
    let sum: f64 = p.iter().sum();
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    if (sum - 1.0).abs() > 1e-10 || min < 0.0 || !sum.is_finite() {
        return Err(ConfoundingError::NotSimplex { sum, min });
    }
    Ok(())
}

/// Bias of the naive contrast for `pair` at one covariate value.
pub fn bias(pair: TreatmentPair, gps_row: &[f64], c: &CMatrix) -> Result<f64, ConfoundingError> {
    check_simplex(gps_row)?;
    let TreatmentPair { j, k } = pair;
    let nj = gps_row.len();
    if j == k || j == 0 || k == 0 || j > nj || k > nj || c.n_arms != nj {
        return Err(ConfoundingError::BadPair(j, k));
    }
    let mut b = -gps_row[j - 1] * c.get(k, j) + gps_row[k - 1] * c.get(j, k);
    for l in 1..=nj {
        if l != j && l != k {
            b -= gps_row[l - 1] * (c.get(k, l) - c.get(j, l));
        }
    }
    Ok(b)
}

/// Y^CF = y − Σ_{l≠arm} p_l·c(arm, l, x).
pub fn adjust_outcome(y: f64, arm: usize, gps_row: &[f64], c: &CMatrix) -> Result<f64, ConfoundingError> {
    check_simplex(gps_row)?;
    Ok(adjust_unchecked(y, arm, gps_row, c))
}

#[inline]
pub(crate) fn adjust_unchecked(y: f64, arm: usize, gps_row: &[f64], c: &CMatrix) -> f64 {
    let mut s = 0.0;
    for (l, &p) in gps_row.iter().enumerate() {
        if l + 1 != arm {
            s += p * c.get(arm, l + 1);
        }
    }
    y - s
}

/// Residual SD of Y regressed by least squares on [1, X, arm indicators 2..J].
pub fn residual_sd(ds: &ObservationalDataset) -> Result<f64, ConfoundingError> {
    let (n, p, j) = (ds.n(), ds.p(), ds.n_arms());
    if n <= p + j + 1 {
        return Err(ConfoundingError::TooFewUnits { n, p, j });
    }
    let mut cols = vec![vec![1.0; n]];
    let mut names = vec!["(intercept)".to_string()];
    for c in 0..p {
        cols.push(ds.column(c));
        names.push(ds.columns()[c].name.clone());
    }
    for a in 2..=j {
        cols.push(ds.treatment().iter().map(|&t| if t == a { 1.0 } else { 0.0 }).collect());
        names.push(format!("{}={}", ds.treatment_name(), ds.label_of_arm(a)));
    }
    let y: Vec<f64> = ds.outcome().iter().map(|&v| v as f64).collect();
    let fit = linalg::ols(&cols, &names, &y)?;
    let df = (n - cols.len()) as f64;
    Ok((fit.rss.max(0.0) / df).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Below,
    Above,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    I,
    II,
    III(Direction),
    IV,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    #[default]
    Uniform,
    TruncNormal,
}

/// Prior for one confounding function under strategies I–IV.
pub fn build_strategy(strategy: Strategy, c0: f64, h: f64, sigma_hat: f64) -> PriorSpec {
    build_strategy_shaped(strategy, c0, h, sigma_hat, Shape::Uniform)
}

/// As [`build_strategy`]; a truncated normal keeps the same support, is
/// centered on `c0` (on 0 for IV) and has spread equal to half the
/// support's half-width.
pub fn build_strategy_shaped(strategy: Strategy, c0: f64, h: f64, sigma_hat: f64, shape: Shape) -> PriorSpec {
    let (center, lo, hi) = match strategy {
        Strategy::I => return PriorSpec::point(c0),
        Strategy::II => (c0, (c0 - h * sigma_hat).max(-1.0), (c0 + h * sigma_hat).min(1.0)),
        Strategy::III(Direction::Below) => (c0, (c0 - 2.0 * h * sigma_hat).max(-1.0), c0),
        Strategy::III(Direction::Above) => (c0, c0, (c0 + 2.0 * h * sigma_hat).min(1.0)),
        Strategy::IV => (0.0, -1.0, 1.0),
    };
    match shape {
        Shape::Uniform => PriorSpec::uniform(lo, hi),
        Shape::TruncNormal => {
            let spread = match strategy {
                Strategy::III(_) => h * sigma_hat,
                Strategy::IV => 0.5,
                _ => 0.5 * h * sigma_hat,
            };
            if spread > 0.0 {
                PriorSpec::TruncNormal { center, spread, lo, hi }
            } else {
                PriorSpec::point(c0)
            }
        }
    }
}
