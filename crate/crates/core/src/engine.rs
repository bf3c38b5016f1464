//! Nested Monte Carlo over GPS draws × sensitivity draws, one outcome-model
//! fit per cell, pooled posterior inference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confounding::{self, ConfoundingError, ConfoundingSpec, SensitivityDrawSet};
use crate::dataset::{DataError, ObservationalDataset, TreatmentPair};
use crate::gps::{self, GpsDraws, GpsError, GpsModel, GpsProvenance};
use crate::rng;
use crate::sumtrees::{self, Design, SumOfTreesConfig, SumOfTreesModel, TreeError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Confounding(#[from] ConfoundingError),
    #[error(transparent)]
    Gps(#[from] GpsError),
    #[error("outcome model: {0}")]
    Tree(#[from] TreeError),
    #[error("fit (m1={m1}, m2={m2}): {source}")]
    Fit {
        m1: usize,
        m2: usize,
        #[source]
        source: TreeError,
    },
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error("ragged inputs: sequence {index} has length {len}, expected {expected}")]
    Ragged { index: usize, len: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Estimand {
    Cate,
    /// Averages over units observed under `reference` (1-based arm).
    Catt { reference: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub m1: usize,
    pub m2: usize,
    pub estimand: Estimand,
    pub gps: GpsModel,
    pub trees: SumOfTreesConfig,
    pub seed: u64,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
    /// Overrides the GPS stream seed derived from `seed`.
    pub gps_seed: Option<u64>,
    /// Overrides the sensitivity-draw stream seed derived from `seed`.
    pub sensitivity_seed: Option<u64>,
}

impl EngineConfig {
    pub fn new(m1: usize, m2: usize, gps: GpsModel, trees: SumOfTreesConfig, seed: u64) -> Self {
        EngineConfig {
            m1,
            m2,
            estimand: Estimand::Cate,
            gps,
            trees,
            seed,
            jobs: 0,
            gps_seed: None,
            sensitivity_seed: None,
        }
    }

    pub fn gps_seed(&self) -> u64 {
        self.gps_seed.unwrap_or_else(|| rng::derive_seed(self.seed, &[rng::domain::GPS]))
    }

    pub fn sensitivity_seed(&self) -> u64 {
        self.sensitivity_seed.unwrap_or_else(|| rng::derive_seed(self.seed, &[rng::domain::SENSITIVITY]))
    }

    pub fn fit_seed(&self, m1: usize, m2: usize) -> u64 {
        rng::derive_seed(self.seed, &[rng::domain::OUTCOME_FIT, m1 as u64, m2 as u64])
    }

    pub fn validate(&self, n_arms: usize) -> Result<(), EngineError> {
        if self.m1 == 0 || self.m2 == 0 {
            return Err(EngineError::Config(format!("M1 and M2 must be at least 1 (got {}, {})", self.m1, self.m2)));
        }
        if let Estimand::Catt { reference } = self.estimand {
            if reference == 0 || reference > n_arms {
                return Err(EngineError::Config(format!("CATT reference arm {reference} outside 1..{n_arms}")));
            }
        }
        self.trees.validate()?;
        Ok(())
    }
}

/// Posterior mean and equal-tailed 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Summary {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
    pub fn covers(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Type-7 sample quantile: linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(samples: &[f64]) -> Summary {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let lower = quantile_sorted(&s, 0.025);
    let upper = quantile_sorted(&s, 0.975);
    // Guard the ordering against rounding in the mean of near-constant samples.
    Summary { mean: mean.clamp(lower, upper), lower, upper }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairPosterior {
    pub pair: TreatmentPair,
    /// Concatenated per-fit samples in (m1, m2) order.
    pub samples: Vec<f64>,
    pub summary: Summary,
    /// Posterior mean of each fit, row-major M1×M2.
    pub fit_means: Vec<f64>,
}

/// Concatenates equal-length per-fit sequences and summarizes them.
pub fn pool(pair: TreatmentPair, per_fit: &[Vec<f64>]) -> Result<PairPosterior, EngineError> {
    let expected = per_fit.first().map(Vec::len).unwrap_or(0);
    if per_fit.is_empty() || expected == 0 {
        return Err(EngineError::Config("nothing to pool".into()));
    }
    if let Some((index, s)) = per_fit.iter().enumerate().find(|(_, s)| s.len() != expected) {
        return Err(EngineError::Ragged { index, len: s.len(), expected });
    }
    let samples = per_fit.concat();
    let summary = summarize(&samples);
    let fit_means = per_fit.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect();
    Ok(PairPosterior { pair, samples, summary, fit_means })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitRecord {
    pub m1: usize,
    pub m2: usize,
    pub seed: u64,
    pub degenerate: bool,
    pub sigma_mean: f64,
    pub grow_acceptance: f64,
    pub mean_leaves: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseEffectPosterior {
    pub m1: usize,
    pub m2: usize,
    pub keep: usize,
    pub seed: u64,
    pub estimand: Estimand,
    pub gps: GpsProvenance,
    pub pairs: Vec<PairPosterior>,
    pub fits: Vec<FitRecord>,
}

impl PairwiseEffectPosterior {
    /// Pooled samples for an ordered pair; reversed pairs are negated draw by draw.
    pub fn samples(&self, pair: TreatmentPair) -> Option<Vec<f64>> {
        if let Some(p) = self.pairs.iter().find(|p| p.pair == pair) {
            return Some(p.samples.clone());
        }
        let p = self.pairs.iter().find(|p| p.pair == pair.swapped())?;
        Some(p.samples.iter().map(|v| -v).collect())
    }

    pub fn summary(&self, pair: TreatmentPair) -> Option<Summary> {
        self.samples(pair).map(|s| summarize(&s))
    }

    pub fn pair(&self, j: usize, k: usize) -> Option<&PairPosterior> {
        self.pairs.iter().find(|p| p.pair == TreatmentPair { j, k })
    }
}

/// Progress callback: (completed fits, total fits).
pub type Progress<'a> = &'a (dyn Fn(usize, usize) + Sync);

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    if jobs == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Runs the whole analysis: GPS fit, then [`run_with_draws`].
pub fn run_sensitivity(
    ds: &ObservationalDataset,
    spec: &ConfoundingSpec,
    cfg: &EngineConfig,
    progress: Option<Progress>,
) -> Result<PairwiseEffectPosterior, EngineError> {
    cfg.validate(ds.n_arms())?;
    spec.check_against(ds)?;
    with_pool(cfg.jobs, || {
        let gps = gps::fit_gps(ds, &cfg.gps, cfg.m1, cfg.gps_seed())?;
        run_inner(ds, spec, &gps, cfg, progress)
    })
}

/// Runs the nested loop with GPS draws supplied by the caller.
pub fn run_with_draws(
    ds: &ObservationalDataset,
    spec: &ConfoundingSpec,
    gps: &GpsDraws,
    cfg: &EngineConfig,
    progress: Option<Progress>,
) -> Result<PairwiseEffectPosterior, EngineError> {
    cfg.validate(ds.n_arms())?;
    spec.check_against(ds)?;
    with_pool(cfg.jobs, || run_inner(ds, spec, gps, cfg, progress))
}

/// The sensitivity draws used for GPS draw `m1`.
pub fn sensitivity_draws(spec: &ConfoundingSpec, cfg: &EngineConfig, m1: usize) -> Result<SensitivityDrawSet, EngineError> {
    let mut r = rng::stream(cfg.sensitivity_seed(), &[m1 as u64]);
    Ok(confounding::sample_c(spec, cfg.m2, &mut r)?)
}

/// Covariates with the arm appended as a last column, row-major.
pub fn augment(ds: &ObservationalDataset, arms: &[usize]) -> Vec<f64> {
    let p = ds.p();
    let mut x = Vec::with_capacity(ds.n() * (p + 1));
    for (i, &a) in arms.iter().enumerate() {
        x.extend_from_slice(ds.row(i));
        x.push(a as f64);
    }
    x
}

/// Design over `[X, A]` with one target set per arm: the estimand's units
/// with their arm set to that arm, equally weighted.
pub fn estimand_design(ds: &ObservationalDataset, estimand: Estimand, n_cuts: usize) -> Result<(Design, Vec<f64>), EngineError> {
    let (n, j) = (ds.n(), ds.n_arms());
    let x_aug = augment(ds, ds.treatment());
    let units: Vec<usize> = match estimand {
        Estimand::Cate => (0..n).collect(),
        Estimand::Catt { reference } => (0..n).filter(|&i| ds.treatment()[i] == reference).collect(),
    };
    if units.is_empty() {
        return Err(EngineError::Config("estimand has no units".into()));
    }
    let mut rows = Vec::with_capacity(units.len() * j * (ds.p() + 1));
    let mut sets = Vec::with_capacity(j);
    let w = 1.0 / units.len() as f64;
    for a in 1..=j {
        let base = (a - 1) * units.len();
        for &i in &units {
            rows.extend_from_slice(ds.row(i));
            rows.push(a as f64);
        }
        sets.push((0..units.len()).map(|r| (base + r, w)).collect());
    }
    let design = Design::new(&x_aug, n, ds.p() + 1, n_cuts)?.with_targets(&rows, units.len() * j, sets)?;
    Ok((design, x_aug))
}

/// Adjusted outcomes for one (GPS draw, sensitivity draw) cell.
pub fn adjusted_outcomes(ds: &ObservationalDataset, gps: &GpsDraws, m1: usize, draw: &confounding::SensitivityDraw) -> Vec<f64> {
    (0..ds.n())
        .map(|i| {
            let c = draw.at(ds.row(i));
            confounding::adjust_unchecked(ds.outcome()[i] as f64, ds.treatment()[i], gps.row(m1, i), &c)
        })
        .collect()
}

fn run_inner(
    ds: &ObservationalDataset,
    spec: &ConfoundingSpec,
    gps: &GpsDraws,
    cfg: &EngineConfig,
    progress: Option<Progress>,
) -> Result<PairwiseEffectPosterior, EngineError> {
    let (n, j) = (ds.n(), ds.n_arms());
    if gps.n() != n || gps.n_arms() != j || gps.m1() < cfg.m1 {
        return Err(EngineError::Config(format!(
            "GPS draws ({}x{}x{}) do not match data ({n} units, {j} arms, M1={})",
            gps.m1(),
            gps.n(),
            gps.n_arms(),
            cfg.m1
        )));
    }
    let (design, x_aug) = estimand_design(ds, cfg.estimand, cfg.trees.n_cuts)?;
    let draws: Vec<SensitivityDrawSet> = (0..cfg.m1).map(|m| sensitivity_draws(spec, cfg, m)).collect::<Result<_, _>>()?;
    let total = cfg.m1 * cfg.m2;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let cells: Vec<(usize, usize)> = (0..cfg.m1).flat_map(|a| (0..cfg.m2).map(move |b| (a, b))).collect();
    let results: Vec<(Vec<Vec<f64>>, FitRecord)> = cells
        .par_iter()
        .map(|&(m1, m2)| {
            let y = adjusted_outcomes(ds, gps, m1, &draws[m1][m2]);
            let seed = cfg.fit_seed(m1, m2);
            let tcfg = SumOfTreesConfig { seed, keep_trees: false, ..cfg.trees.clone() };
            let model = sumtrees::fit_design(&design, &x_aug, &y, &tcfg).map_err(|source| EngineError::Fit { m1, m2, source })?;
            let record = fit_record(m1, m2, seed, &model);
            let per_arm = model.target_draws().to_vec();
            if let Some(cb) = progress {
                let k = done.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
                cb(k, total);
            }
            Ok((per_arm, record))
        })
        .collect::<Result<_, EngineError>>()?;
    let mut pairs = Vec::new();
    for pair in TreatmentPair::all(j) {
        let per_fit: Vec<Vec<f64>> = results
            .iter()
            .map(|(per_arm, _)| per_arm.iter().map(|v| v[pair.j - 1] - v[pair.k - 1]).collect())
            .collect();
        pairs.push(pool(pair, &per_fit)?);
    }
    Ok(PairwiseEffectPosterior {
        m1: cfg.m1,
        m2: cfg.m2,
        keep: cfg.trees.keep,
        seed: cfg.seed,
        estimand: cfg.estimand,
        gps: gps.provenance().clone(),
        pairs,
        fits: results.into_iter().map(|(_, r)| r).collect(),
    })
}

fn fit_record(m1: usize, m2: usize, seed: u64, model: &SumOfTreesModel) -> FitRecord {
    let d = model.diagnostics();
    FitRecord {
        m1,
        m2,
        seed,
        degenerate: model.degenerate(),
        sigma_mean: model.sigma_draws().iter().sum::<f64>() / model.kept() as f64,
        grow_acceptance: if d.grow_proposed > 0 { d.grow_accepted as f64 / d.grow_proposed as f64 } else { 0.0 },
        mean_leaves: d.mean_leaves,
    }
}

/// Per-draw estimand values from a model fitted with `keep_trees` on `[X, A]`.
pub fn estimate_pair_effect(
    model: &SumOfTreesModel,
    ds: &ObservationalDataset,
    pair: TreatmentPair,
    estimand: Estimand,
) -> Result<Vec<f64>, EngineError> {
    let units: Vec<usize> = match estimand {
        Estimand::Cate => (0..ds.n()).collect(),
        Estimand::Catt { reference } => (0..ds.n()).filter(|&i| ds.treatment()[i] == reference).collect(),
    };
    if units.is_empty() {
        return Err(EngineError::Config("empty reference group".into()));
    }
    let rows = |arm: usize| -> Vec<f64> {
        let mut x = Vec::with_capacity(units.len() * (ds.p() + 1));
        for &i in &units {
            x.extend_from_slice(ds.row(i));
            x.push(arm as f64);
        }
        x
    };
    let m = units.len();
    let pj = model.predict_draws(&rows(pair.j), m)?;
    let pk = model.predict_draws(&rows(pair.k), m)?;
    Ok(pj
        .iter()
        .zip(&pk)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>() / m as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(j: usize, k: usize) -> TreatmentPair {
        TreatmentPair { j, k }
    }

    #[test]
    fn single_sequence_pools_to_itself() {
        let s = vec![0.1, 0.4, 0.2, 0.3];
        let p = pool(pair(1, 2), &[s.clone()]).unwrap();
        assert_eq!(p.samples, s);
        assert!((p.summary.mean - 0.25).abs() < 1e-15);
        assert!((p.summary.lower - (0.1 + 0.075 * 0.1)).abs() < 1e-12);
        assert!((p.summary.upper - (0.3 + 0.925 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn two_constant_sequences() {
        let p = pool(pair(1, 2), &[vec![0.0; 100], vec![1.0; 100]]).unwrap();
        assert_eq!(p.summary.mean, 0.5);
        assert_eq!((p.summary.lower, p.summary.upper), (0.0, 1.0));
        assert_eq!(p.fit_means, vec![0.0, 1.0]);
    }

    #[test]
    fn ragged_inputs_rejected() {
        assert!(matches!(pool(pair(1, 2), &[vec![0.0; 3], vec![0.0; 2]]), Err(EngineError::Ragged { index: 1, .. })));
    }

    #[test]
    fn normal_quantiles() {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rng::stream(1, &[]);
        let s: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut r)).collect();
        let sum = summarize(&s);
        assert!((sum.lower + 1.96).abs() < 0.03);
        assert!((sum.upper - 1.96).abs() < 0.03);
    }
}
