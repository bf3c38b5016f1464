//! Generalized propensity score posterior draws.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::ObservationalDataset;
use crate::linalg;
use crate::rng;

/// Lower clamp for every GPS entry.
pub const CLAMP_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GpsError {
    #[error("stratifying column '{0}' is continuous")]
    ContinuousColumn(String),
    #[error("stratifying column index {0} does not exist")]
    NoSuchColumn(usize),
    #[error("{0} joint strata exceed the limit of 64")]
    TooManyStrata(usize),
    #[error("empty stratum {0}")]
    EmptyStratum(String),
    #[error("multinomial logistic fit did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },
    #[error("invalid GPS configuration: {0}")]
    Config(String),
    #[error("GPS dimension mismatch: {0}")]
    Dimension(String),
    #[error("GPS cache {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpsProvenance {
    pub model: String,
    pub seed: u64,
    pub m1: usize,
}

/// M1 draws of an n×J matrix of simplex rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsDraws {
    m1: usize,
    n: usize,
    j: usize,
    values: Vec<f64>,
    provenance: GpsProvenance,
}

/// Clamps every entry to `[CLAMP_FLOOR, 1 - CLAMP_FLOOR]` and renormalizes.
pub fn clamp_row(row: &mut [f64]) {
    for v in row.iter_mut() {
        *v = v.clamp(CLAMP_FLOOR, 1.0 - CLAMP_FLOOR);
    }
    let s: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= s;
    }
}

impl GpsDraws {
    /// Wraps raw probabilities laid out `[m][i][arm]`, clamping each row.
    pub fn from_values(m1: usize, n: usize, j: usize, mut values: Vec<f64>, model: &str, seed: u64) -> Result<Self, GpsError> {
        if m1 == 0 || j < 2 || values.len() != m1 * n * j {
            return Err(GpsError::Dimension(format!("{} values for {m1}x{n}x{j}", values.len())));
        }
        for row in values.chunks_mut(j) {
            let s: f64 = row.iter().sum();
            if !s.is_finite() || row.iter().any(|v| *v < 0.0) || (s - 1.0).abs() > 1e-6 {
                return Err(GpsError::Dimension(format!("row {row:?} is not a probability vector")));
            }
            clamp_row(row);
        }
        Ok(GpsDraws { m1, n, j, values, provenance: GpsProvenance { model: model.into(), seed, m1 } })
    }

    pub fn m1(&self) -> usize {
        self.m1
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn n_arms(&self) -> usize {
        self.j
    }
    pub fn provenance(&self) -> &GpsProvenance {
        &self.provenance
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Draw `m` (0-based) as a row-major n×J block.
    pub fn draw(&self, m: usize) -> &[f64] {
        let size = self.n * self.j;
        &self.values[m * size..(m + 1) * size]
    }

    pub fn row(&self, m: usize, i: usize) -> &[f64] {
        let start = (m * self.n + i) * self.j;
        &self.values[start..start + self.j]
    }

    /// Posterior mean, row-major n×J.
    pub fn posterior_mean(&self) -> Vec<f64> {
        let size = self.n * self.j;
        let mut mean = vec![0.0; size];
        for m in 0..self.m1 {
            for (acc, v) in mean.iter_mut().zip(self.draw(m)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= self.m1 as f64);
        mean
    }
}

/// Multinomial logistic optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilogitConfig {
    pub ridge: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for MultilogitConfig {
    fn default() -> Self {
        MultilogitConfig { ridge: 1e-3, max_iter: 100, tol: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum GpsModel {
    Stratified {
        columns: Vec<usize>,
        #[serde(default = "one")]
        prior_weight: f64,
    },
    Multilogit(MultilogitConfig),
}

fn one() -> f64 {
    1.0
}

impl GpsModel {
    pub fn name(&self) -> &'static str {
        match self {
            GpsModel::Stratified { .. } => "stratified-dirichlet",
            GpsModel::Multilogit(_) => "bootstrap-multilogit",
        }
    }
}

/// Fits the selected model with GPS seed `seed`.
pub fn fit_gps(ds: &ObservationalDataset, model: &GpsModel, m1: usize, seed: u64) -> Result<GpsDraws, GpsError> {
    let mut r = rng::stream(seed, &[rng::domain::GPS]);
    let mut draws = match model {
        GpsModel::Stratified { columns, prior_weight } => fit_gps_stratified(ds, columns, m1, *prior_weight, &mut r),
        GpsModel::Multilogit(cfg) => fit_gps_multilogit(ds, m1, cfg, &mut r),
    }?;
    draws.provenance.seed = seed;
    Ok(draws)
}

/// Dirichlet(counts + prior_weight) per joint stratum of discrete columns.
pub fn fit_gps_stratified(
    ds: &ObservationalDataset,
    strat_columns: &[usize],
    m1: usize,
    prior_weight: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GpsDraws, GpsError> {
    if m1 == 0 {
        return Err(GpsError::Config("M1 must be at least 1".into()));
    }
    if !(prior_weight > 0.0 && prior_weight.is_finite()) {
        return Err(GpsError::Config(format!("prior_weight must be positive, got {prior_weight}")));
    }
    let (n, j) = (ds.n(), ds.n_arms());
    let mut levels: Vec<Vec<i64>> = Vec::new();
    let mut total = 1usize;
    for &c in strat_columns {
        let meta = ds.columns().get(c).ok_or(GpsError::NoSuchColumn(c))?;
        if !meta.kind.is_discrete() {
            return Err(GpsError::ContinuousColumn(meta.name.clone()));
        }
        let mut lv: Vec<i64> = (0..n).map(|i| ds.value(i, c).round() as i64).collect();
        lv.sort_unstable();
        lv.dedup();
        total = total.saturating_mul(lv.len());
        if total > 64 {
            return Err(GpsError::TooManyStrata(total));
        }
        levels.push(lv);
    }
    let key_of = |i: usize| -> usize {
        strat_columns.iter().zip(&levels).fold(0, |acc, (&c, lv)| {
            let v = ds.value(i, c).round() as i64;
            acc * lv.len() + lv.binary_search(&v).expect("level observed")
        })
    };
    let keys: Vec<usize> = (0..n).map(key_of).collect();
    let mut counts = vec![vec![0usize; j]; total];
    for (i, &s) in keys.iter().enumerate() {
        counts[s][ds.treatment()[i] - 1] += 1;
    }
    if let Some(empty) = counts.iter().position(|c| c.iter().all(|&v| v == 0)) {
        let mut rem = empty;
        let mut parts = Vec::new();
        for (&c, lv) in strat_columns.iter().zip(&levels).rev() {
            parts.push(format!("{}={}", ds.columns()[c].name, lv[rem % lv.len()]));
            rem /= lv.len();
        }
        parts.reverse();
        return Err(GpsError::EmptyStratum(parts.join(", ")));
    }
    let gammas: Vec<Vec<Gamma<f64>>> = counts
        .iter()
        .map(|c| c.iter().map(|&k| Gamma::new(k as f64 + prior_weight, 1.0).expect("positive shape")).collect())
        .collect();
    let mut values = Vec::with_capacity(m1 * n * j);
    for _ in 0..m1 {
        let simplexes: Vec<Vec<f64>> = gammas
            .iter()
            .map(|gs| {
                let mut g: Vec<f64> = gs.iter().map(|d| d.sample(rng)).collect();
                let s: f64 = g.iter().sum();
                g.iter_mut().for_each(|v| *v /= s);
                g
            })
            .collect();
        for &s in &keys {
            values.extend_from_slice(&simplexes[s]);
        }
    }
    GpsDraws::from_values(m1, n, j, values, "stratified-dirichlet", 0)
}

/// Bayesian-bootstrap multinomial logistic GPS. Replicates run in parallel
/// on per-replicate streams, assembled in replicate order.
pub fn fit_gps_multilogit(
    ds: &ObservationalDataset,
    m1: usize,
    cfg: &MultilogitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GpsDraws, GpsError> {
    if m1 == 0 {
        return Err(GpsError::Config("M1 must be at least 1".into()));
    }
    if !(cfg.ridge >= 0.0 && cfg.ridge.is_finite()) {
        return Err(GpsError::Config(format!("ridge must be non-negative, got {}", cfg.ridge)));
    }
    let (n, j) = (ds.n(), ds.n_arms());
    let design = Standardized::new(ds);
    let seeds: Vec<u64> = (0..m1).map(|_| rng.random()).collect();
    let blocks: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut r)).collect();
            let total: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|e| e * n as f64 / total).collect();
            let fit = fit_multilogit_weighted(&design.x, design.d, ds.treatment(), j, &w, cfg)?;
            let mut out = Vec::with_capacity(n * j);
            for i in 0..n {
                out.extend(fit.predict(&design.x[i * design.d..(i + 1) * design.d]));
            }
            Ok(out)
        })
        .collect::<Result<_, GpsError>>()?;
    GpsDraws::from_values(m1, n, j, blocks.concat(), "bootstrap-multilogit", 0)
}

/// Covariates standardized to mean 0 / SD 1 with constant columns dropped.
struct Standardized {
    x: Vec<f64>,
    d: usize,
}

impl Standardized {
    fn new(ds: &ObservationalDataset) -> Self {
        let n = ds.n();
        let mut cols = Vec::new();
        for c in 0..ds.p() {
            let v = ds.column(c);
            let mean = v.iter().sum::<f64>() / n as f64;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            if sd > 1e-12 * (1.0 + mean.abs()) {
                cols.push(v.iter().map(|x| (x - mean) / sd).collect::<Vec<_>>());
            }
        }
        let d = cols.len();
        let mut x = vec![0.0; n * d];
        for (c, col) in cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                x[i * d + c] = *v;
            }
        }
        Standardized { x, d }
    }
}

/// Reference-class (arm 1) multinomial logistic coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MultilogitFit {
    /// (J−1) blocks of [intercept, slopes...].
    pub beta: Vec<f64>,
    pub n_arms: usize,
    pub d: usize,
    pub iterations: usize,
}

impl MultilogitFit {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.n_arms];
        for a in 1..self.n_arms {
            let b = &self.beta[(a - 1) * (self.d + 1)..a * (self.d + 1)];
            eta[a] = b[0] + linalg::dot(&b[1..], x);
        }
        softmax(&eta)
    }
}

fn softmax(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = eta.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn log_softmax_at(eta: &[f64], a: usize) -> f64 {
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + eta.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    eta[a] - lse
}

/// Weighted ridge multinomial logistic regression by damped Newton.
/// `x` is row-major n×d; `arms` are 1-based; intercepts are unpenalized.
pub fn fit_multilogit_weighted(
    x: &[f64],
    d: usize,
    arms: &[usize],
    n_arms: usize,
    weights: &[f64],
    cfg: &MultilogitConfig,
) -> Result<MultilogitFit, GpsError> {
    let n = arms.len();
    if x.len() != n * d || weights.len() != n || n_arms < 2 {
        return Err(GpsError::Dimension("multilogit inputs".into()));
    }
    let k = n_arms - 1;
    let w1 = d + 1;
    let dim = k * w1;
    let eta_of = |beta: &[f64], i: usize| -> Vec<f64> {
        let xi = &x[i * d..(i + 1) * d];
        let mut eta = vec![0.0; n_arms];
        for a in 1..n_arms {
            let b = &beta[(a - 1) * w1..a * w1];
            eta[a] = b[0] + linalg::dot(&b[1..], xi);
        }
        eta
    };
    let objective = |beta: &[f64]| -> f64 {
        let mut f = 0.0;
        for i in 0..n {
            f -= weights[i] * log_softmax_at(&eta_of(beta, i), arms[i] - 1);
        }
        for a in 0..k {
            f += 0.5 * cfg.ridge * beta[a * w1 + 1..(a + 1) * w1].iter().map(|b| b * b).sum::<f64>();
        }
        f
    };
    let wsum: f64 = weights.iter().sum();
    let mut beta = vec![0.0; dim];
    let mut f = objective(&beta);
    let mut grad_norm = f64::INFINITY;
    for iter in 0..cfg.max_iter {
        let mut g = vec![0.0; dim];
        let mut h = vec![0.0; dim * dim];
        let mut feat = vec![0.0; w1];
        for i in 0..n {
            let p = softmax(&eta_of(&beta, i));
            feat[0] = 1.0;
            feat[1..].copy_from_slice(&x[i * d..(i + 1) * d]);
            let wi = weights[i];
            for a in 0..k {
                let resid = p[a + 1] - if arms[i] == a + 2 { 1.0 } else { 0.0 };
                for u in 0..w1 {
                    g[a * w1 + u] += wi * resid * feat[u];
                }
                for b in 0..k {
                    let coef = wi * p[a + 1] * (if a == b { 1.0 } else { 0.0 } - p[b + 1]);
                    if coef == 0.0 {
                        continue;
                    }
                    for u in 0..w1 {
                        let cu = coef * feat[u];
                        let row = (a * w1 + u) * dim + b * w1;
                        for v in 0..w1 {
                            h[row + v] += cu * feat[v];
                        }
                    }
                }
            }
        }
        for a in 0..k {
            for u in 1..w1 {
                let idx = a * w1 + u;
                g[idx] += cfg.ridge * beta[idx];
                h[idx * dim + idx] += cfg.ridge;
            }
        }
        grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if grad_norm <= cfg.tol * (1.0 + wsum) {
            return Ok(MultilogitFit { beta, n_arms, d, iterations: iter });
        }
        let mut jitter = 0.0;
        let step = loop {
            let mut hj = h.clone();
            for t in 0..dim {
                hj[t * dim + t] += jitter;
            }
            match linalg::cholesky_solve(&hj, &g, dim) {
                Ok(s) => break s,
                Err(_) if jitter < 1e6 * (1.0 + wsum) => jitter = if jitter == 0.0 { 1e-8 * (1.0 + wsum) } else { jitter * 10.0 },
                Err(_) => return Err(GpsError::NonConvergence { iterations: iter, grad_norm }),
            }
        };
        let slope: f64 = -linalg::dot(&g, &step);
        if -slope <= 1e-10 * (1.0 + f.abs()) {
            // Decrement below objective roundoff: take the pure Newton step.
            beta.iter_mut().zip(&step).for_each(|(b, s)| *b -= s);
            f = objective(&beta);
            continue;
        }
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b - t * s).collect();
            let fc = objective(&cand);
            if fc.is_finite() && fc <= f + 1e-4 * t * slope {
                beta = cand;
                f = fc;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(GpsError::NonConvergence { iterations: iter, grad_norm });
            }
        }
    }
    Err(GpsError::NonConvergence { iterations: cfg.max_iter, grad_norm })
}

/// On-disk cache of GPS draws keyed by data, model, M1 and seed.
#[derive(Debug, Clone)]
pub struct GpsCache {
    dir: PathBuf,
}

const MAGIC: &[u8; 4] = b"GPSD";
const VERSION: u32 = 1;

impl GpsCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        GpsCache { dir: dir.into() }
    }

    pub fn key(ds: &ObservationalDataset, model: &GpsModel, m1: usize, seed: u64) -> String {
        let mut h = Sha256::new();
        h.update((ds.n() as u64).to_le_bytes());
        h.update((ds.p() as u64).to_le_bytes());
        for v in ds.covariates() {
            h.update(v.to_le_bytes());
        }
        for &a in ds.treatment() {
            h.update((a as u64).to_le_bytes());
        }
        h.update(serde_json::to_vec(model).expect("model serializes"));
        h.update((m1 as u64).to_le_bytes());
        h.update(seed.to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.gpsd"))
    }

    /// Returns cached draws or fits and stores them.
    pub fn fetch_or_fit(&self, ds: &ObservationalDataset, model: &GpsModel, m1: usize, seed: u64) -> Result<GpsDraws, GpsError> {
        let path = self.path_for(&Self::key(ds, model, m1, seed));
        if path.exists() {
            let draws = read_draws(&path)?;
            if draws.n == ds.n() && draws.j == ds.n_arms() && draws.m1 == m1 {
                return Ok(draws);
            }
        }
        let draws = fit_gps(ds, model, m1, seed)?;
        std::fs::create_dir_all(&self.dir).map_err(|e| cache_err(&self.dir, e))?;
        write_draws(&path, &draws)?;
        Ok(draws)
    }
}

fn cache_err(path: &Path, e: impl std::fmt::Display) -> GpsError {
    GpsError::Cache { path: path.display().to_string(), message: e.to_string() }
}

pub fn write_draws(path: &Path, draws: &GpsDraws) -> Result<(), GpsError> {
    let mut buf = Vec::with_capacity(64 + draws.values.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [draws.m1 as u64, draws.n as u64, draws.j as u64, draws.provenance.seed] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let name = draws.provenance.model.as_bytes();
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name);
    for v in &draws.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| cache_err(path, e))?;
    f.write_all(&buf).map_err(|e| cache_err(path, e))
}

pub fn read_draws(path: &Path) -> Result<GpsDraws, GpsError> {
    let mut buf = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| cache_err(path, e))?;
    let bad = |m: &str| cache_err(path, m);
    let mut pos = 0usize;
    let mut take = |k: usize| -> Result<&[u8], GpsError> {
        let s = buf.get(pos..pos + k).ok_or_else(|| bad("truncated file"))?;
        pos += k;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut dims = [0u64; 4];
    for d in dims.iter_mut() {
        *d = u64::from_le_bytes(take(8)?.try_into().unwrap());
    }
    let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let model = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| bad("model name is not UTF-8"))?;
    let (m1, n, j) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let count = m1.checked_mul(n).and_then(|v| v.checked_mul(j)).ok_or_else(|| bad("dimensions overflow"))?;
    let raw = take(count * 8)?;
    let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(GpsDraws { m1, n, j, values, provenance: GpsProvenance { model, seed: dims[3], m1 } })
}

/// Per-stratum posterior-mean GPS keyed by the stratum's column values.
pub fn stratum_means(ds: &ObservationalDataset, gps: &GpsDraws, columns: &[usize]) -> BTreeMap<Vec<i64>, Vec<f64>> {
    let mean = gps.posterior_mean();
    let j = gps.n_arms();
    let mut acc: BTreeMap<Vec<i64>, (Vec<f64>, usize)> = BTreeMap::new();
    for i in 0..ds.n() {
        let key: Vec<i64> = columns.iter().map(|&c| ds.value(i, c).round() as i64).collect();
        let e = acc.entry(key).or_insert_with(|| (vec![0.0; j], 0));
        for a in 0..j {
            e.0[a] += mean[i * j + a];
        }
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, c))| (k, s.iter().map(|v| v / c as f64).collect())).collect()
}
