//! Synthetic data with known truth, evaluation metrics, contour grids and
//! the replication harness.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confounding::{
    self, build_strategy_shaped, CMatrix, ConfoundingError, ConfoundingSpec, Direction, PriorSpec, Shape, Strategy,
};
use crate::dataset::{ColumnKind, ColumnMeta, DataError, ObservationalDataset, TreatmentPair};
use crate::engine::{self, EngineConfig, EngineError, Summary};
use crate::gps::{self, GpsDraws, GpsError, GpsModel, MultilogitConfig};
use crate::rng;
use crate::sumtrees::SumOfTreesConfig;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Confounding(#[from] ConfoundingError),
    #[error(transparent)]
    Gps(#[from] GpsError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid simulation setting: {0}")]
    Config(String),
    #[error("grid has {cells} cells (limit {limit}); it would need about {fits} outcome-model fits")]
    GridTooFine { cells: usize, limit: usize, fits: usize },
}

/// Potential outcomes, hidden covariates and true GPS for one synthetic draw.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    n: usize,
    n_arms: usize,
    potential: Vec<u8>,
    mu: Vec<f64>,
    gps: Vec<f64>,
    hidden: Vec<f64>,
    hidden_names: Vec<String>,
    observed: ObservationalDataset,
    oracle: ObservationalDataset,
    config: serde_json::Value,
    dgp: Dgp,
}

#[derive(Debug, Clone)]
enum Dgp {
    Illustrative,
    Contextual(Box<ContextualDgpConfig>),
}

struct Draws {
    columns: Vec<ColumnMeta>,
    x: Vec<f64>,
    hidden: Vec<usize>,
    arms: Vec<usize>,
    potential: Vec<u8>,
    mu: Vec<f64>,
    gps: Vec<f64>,
}

impl SyntheticTruth {
    fn assemble(d: Draws, n_arms: usize, config: serde_json::Value, dgp: Dgp) -> Result<Self, SimError> {
        let n = d.arms.len();
        let p = d.columns.len();
        let outcome: Vec<u8> = (0..n).map(|i| d.potential[i * n_arms + d.arms[i] - 1]).collect();
        let labels: Vec<i64> = (1..=n_arms as i64).collect();
        let keep: Vec<usize> = (0..p).filter(|c| !d.hidden.contains(c)).collect();
        let mut obs_x = Vec::with_capacity(n * keep.len());
        let mut hidden = Vec::with_capacity(n * d.hidden.len());
        for row in d.x.chunks(p) {
            obs_x.extend(keep.iter().map(|&c| row[c]));
            hidden.extend(d.hidden.iter().map(|&c| row[c]));
        }
        let observed = ObservationalDataset::new(
            keep.iter().map(|&c| d.columns[c].clone()).collect(),
            obs_x,
            d.arms.clone(),
            outcome.clone(),
            labels.clone(),
        )?
        .with_names("y", "a");
        let oracle = ObservationalDataset::new(d.columns.clone(), d.x, d.arms, outcome, labels)?.with_names("y", "a");
        Ok(SyntheticTruth {
            n,
            n_arms,
            potential: d.potential,
            mu: d.mu,
            gps: d.gps,
            hidden,
            hidden_names: d.hidden.iter().map(|&c| d.columns[c].name.clone()).collect(),
            observed,
            oracle,
            config,
            dgp,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn n_arms(&self) -> usize {
        self.n_arms
    }
    /// The data an analyst sees: hidden covariates removed.
    pub fn observed(&self) -> &ObservationalDataset {
        &self.observed
    }
    /// All covariates, hidden ones included.
    pub fn oracle(&self) -> &ObservationalDataset {
        &self.oracle
    }
    /// Realized Y_i(arm), arm 1-based.
    pub fn potential(&self, i: usize, arm: usize) -> u8 {
        self.potential[i * self.n_arms + arm - 1]
    }
    /// P(Y_i(arm) = 1 | all covariates).
    pub fn mu(&self, i: usize, arm: usize) -> f64 {
        self.mu[i * self.n_arms + arm - 1]
    }
    /// Assignment probabilities given all covariates.
    pub fn gps_row(&self, i: usize) -> &[f64] {
        &self.gps[i * self.n_arms..(i + 1) * self.n_arms]
    }
    /// Hidden covariates, row-major n×h.
    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }
    pub fn hidden_names(&self) -> &[String] {
        &self.hidden_names
    }
    pub fn config(&self) -> &serde_json::Value {
        &self.config
    }

    /// Observed Y equals the potential outcome of the received arm, unit by unit.
    pub fn is_consistent(&self) -> bool {
        let a = self.observed.treatment();
        let y = self.observed.outcome();
        (0..self.n).all(|i| y[i] == self.potential(i, a[i]))
    }

    fn arm_mean(&self, of: usize, given: usize, filter: impl Fn(usize) -> bool) -> f64 {
        let a = self.observed.treatment();
        let (mut s, mut c) = (0.0, 0usize);
        for i in (0..self.n).filter(|&i| a[i] == given && filter(i)) {
            s += self.potential(i, of) as f64;
            c += 1;
        }
        s / c as f64
    }

    /// mean(Y(j) | A=j) − mean(Y(j) | A=k) over the realized sample.
    pub fn true_c0(&self, pair: TreatmentPair) -> f64 {
        self.arm_mean(pair.j, pair.j, |_| true) - self.arm_mean(pair.j, pair.k, |_| true)
    }

    pub fn c0_matrix(&self) -> CMatrix {
        let mut c = CMatrix::zeros(self.n_arms);
        for j in 1..=self.n_arms {
            for k in (1..=self.n_arms).filter(|&k| k != j) {
                c.set(j, k, self.true_c0(TreatmentPair { j, k }));
            }
        }
        c
    }

    /// Scalar summary of the covariate-conditional confounding function:
    /// c̄(j,l) = Σ_i p_l(x_i) c(j,l,x_i) / Σ_i p_l(x_i), with p and c
    /// conditional on the observed covariates only. Adjusting with c̄ removes
    /// the hidden-confounding bias of every arm mean exactly on average,
    /// which the marginal [`true_c0`](Self::true_c0) does not when observed
    /// covariates also confound.
    ///
    /// The illustrative design uses realized outcomes within levels of X1;
    /// the contextual design integrates the hidden covariates numerically.
    pub fn true_c_bar(&self) -> CMatrix {
        let j = self.n_arms;
        let mut c = CMatrix::zeros(j);
        match &self.dgp {
            Dgp::Illustrative => {
                let a = self.observed.treatment();
                for (jj, l) in (1..=j).flat_map(|jj| (1..=j).filter(move |&l| l != jj).map(move |l| (jj, l))) {
                    let strata = self.true_c_stratified(TreatmentPair { j: jj, k: l }, 0);
                    let (mut num, mut den) = (0.0, 0.0);
                    for i in (0..self.n).filter(|&i| a[i] == l) {
                        let v = strata[&confounding::stratum_key(self.observed.value(i, 0))];
                        if v.is_finite() {
                            num += v;
                        }
                        den += 1.0;
                    }
                    c.set(jj, l, num / den);
                }
            }
            Dgp::Contextual(cfg) => {
                let nodes = cfg.hidden_nodes();
                let mut num = [[0.0; 3]; 3];
                let mut den = [0.0; 3];
                for i in 0..self.n {
                    let (p, m) = cfg.observed_conditionals(self.oracle.row(i), &nodes);
                    for jj in 0..3 {
                        for l in 0..3 {
                            num[jj][l] += p[l] * (m[jj][jj] - m[l][jj]);
                        }
                    }
                    for l in 0..3 {
                        den[l] += p[l];
                    }
                }
                for jj in 0..3 {
                    for l in (0..3).filter(|&l| l != jj) {
                        c.set(jj + 1, l + 1, num[jj][l] / den[l]);
                    }
                }
            }
        }
        c
    }

    /// The same difference within each level of an observed discrete column.
    pub fn true_c_stratified(&self, pair: TreatmentPair, column: usize) -> BTreeMap<i64, f64> {
        let key = |i: usize| confounding::stratum_key(self.observed.value(i, column));
        let mut levels: Vec<i64> = (0..self.n).map(key).collect();
        levels.sort_unstable();
        levels.dedup();
        levels
            .into_iter()
            .map(|l| {
                let f = |i: usize| key(i) == l;
                (l, self.arm_mean(pair.j, pair.j, f) - self.arm_mean(pair.j, pair.k, f))
            })
            .collect()
    }

    /// mean_i [mu_i(j) − mu_i(k)].
    pub fn sample_cate(&self, pair: TreatmentPair) -> f64 {
        (0..self.n).map(|i| self.mu(i, pair.j) - self.mu(i, pair.k)).sum::<f64>() / self.n as f64
    }

    /// mean_i [Y_i(j) − Y_i(k)].
    pub fn realized_cate(&self, pair: TreatmentPair) -> f64 {
        (0..self.n).map(|i| self.potential(i, pair.j) as f64 - self.potential(i, pair.k) as f64).sum::<f64>()
            / self.n as f64
    }

    /// Observed event rate per arm.
    pub fn event_rates(&self) -> Vec<f64> {
        (1..=self.n_arms).map(|a| self.arm_mean(a, a, |_| true)).collect()
    }

    /// Mean over units of the smallest true assignment probability.
    pub fn overlap_mass(&self) -> f64 {
        self.gps
            .chunks(self.n_arms)
            .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / self.n as f64
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn categorical(u: f64, p: &[f64]) -> usize {
    let mut acc = 0.0;
    for (a, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return a + 1;
        }
    }
    p.len()
}

// Illustrative three-arm DGP: measured X1, hidden U.

const ILLUS_ASSIGN: [[f64; 2]; 3] = [[0.2, 0.4], [-0.3, 0.8], [0.1, 0.5]];
const ILLUS_NOISE_SD: f64 = 0.1;
const ILLUS_P_X1: f64 = 0.4;
const ILLUS_P_U: f64 = 0.5;

/// Outcome logit coefficients on (X1, U, X1·U) per arm.
fn illus_outcome(interaction: bool) -> [[f64; 3]; 3] {
    if interaction {
        [[-0.8, -1.2, 1.5], [-0.6, 0.5, 0.3], [0.3, 1.3, 0.2]]
    } else {
        [[-0.8, -0.61, 0.0], [-0.6, 0.62, 0.0], [0.3, 1.06, 0.0]]
    }
}

/// P(Y(j) = 1 | X1, U) for j = 1..3.
pub fn illustrative_mu(interaction: bool, x1: f64, u: f64) -> [f64; 3] {
    let b = illus_outcome(interaction);
    std::array::from_fn(|j| sigmoid(b[j][0] * x1 + b[j][1] * u + b[j][2] * x1 * u))
}

fn illus_logits(x1: f64, u: f64) -> [f64; 3] {
    std::array::from_fn(|j| ILLUS_ASSIGN[j][0] * x1 + ILLUS_ASSIGN[j][1] * u)
}

/// Draws the illustrative DGP: X1 ~ Bern(0.4), U ~ Bern(0.5), multinomial-logit
/// assignment with N(0, 0.1²) noise on each logit, logistic potential outcomes.
pub fn gen_illustrative(n: usize, interaction: bool, seed: u64) -> Result<SyntheticTruth, SimError> {
    if n < 100 {
        return Err(SimError::Config(format!("illustrative DGP needs n >= 100, got {n}")));
    }
    let mut r = rng::stream(seed, &[rng::domain::DGP]);
    let noise = Normal::new(0.0, ILLUS_NOISE_SD).expect("valid sd");
    let mut d = Draws {
        columns: vec![
            ColumnMeta { name: "X1".into(), kind: ColumnKind::Binary },
            ColumnMeta { name: "U".into(), kind: ColumnKind::Binary },
        ],
        x: Vec::with_capacity(2 * n),
        hidden: vec![1],
        arms: Vec::with_capacity(n),
        potential: Vec::with_capacity(3 * n),
        mu: Vec::with_capacity(3 * n),
        gps: Vec::with_capacity(3 * n),
    };
    for _ in 0..n {
        let x1 = if r.random::<f64>() < ILLUS_P_X1 { 1.0 } else { 0.0 };
        let u = if r.random::<f64>() < ILLUS_P_U { 1.0 } else { 0.0 };
        let base = illus_logits(x1, u);
        let l: Vec<f64> = base.iter().map(|b| b + noise.sample(&mut r)).collect();
        let p = softmax(&l);
        let a = categorical(r.random(), &p);
        let mu = illustrative_mu(interaction, x1, u);
        for m in mu {
            d.potential.push(u8::from(r.random::<f64>() < m));
        }
        d.x.extend([x1, u]);
        d.arms.push(a);
        d.mu.extend(mu);
        d.gps.extend(p);
    }
    let config = serde_json::json!({ "scenario": if interaction { "illustrative" } else { "illustrative-nointeraction" }, "n": n, "seed": seed });
    SyntheticTruth::assemble(d, 3, config, Dgp::Illustrative)
}

/// Population quantities of the illustrative DGP, computed by enumerating
/// (X1, U) and integrating the assignment noise numerically.
#[derive(Debug, Clone, PartialEq)]
pub struct IllustrativeExact {
    pub arm_probs: [f64; 3],
    /// E[Y | A=j].
    pub event_rates: [f64; 3],
    /// E[Y(j)].
    pub mean_potential: [f64; 3],
    pub c0: CMatrix,
    /// P(A=j | X1=x), indexed by x.
    pub gps_given_x1: [[f64; 3]; 2],
    /// c(j, k, x) indexed by x.
    pub c_given_x1: [CMatrix; 2],
    /// E[Y(j) | X1=x].
    pub mean_potential_given_x1: [[f64; 3]; 2],
}

impl IllustrativeExact {
    pub fn cate(&self, pair: TreatmentPair) -> f64 {
        self.mean_potential[pair.j - 1] - self.mean_potential[pair.k - 1]
    }
}

/// E over the logit noise of the assignment probabilities at (x1, u).
fn illus_mean_gps(x1: f64, u: f64) -> [f64; 3] {
    const K: usize = 25;
    let nodes: Vec<(f64, f64)> = (0..K)
        .map(|i| {
            let z = -6.0 + 12.0 * i as f64 / (K - 1) as f64;
            (z * ILLUS_NOISE_SD, (-0.5 * z * z).exp())
        })
        .collect();
    let wsum: f64 = nodes.iter().map(|n| n.1).sum();
    let base = illus_logits(x1, u);
    let mut acc = [0.0; 3];
    for &(e1, w1) in &nodes {
        for &(e2, w2) in &nodes {
            for &(e3, w3) in &nodes {
                let p = softmax(&[base[0] + e1, base[1] + e2, base[2] + e3]);
                let w = w1 * w2 * w3;
                for a in 0..3 {
                    acc[a] += w * p[a];
                }
            }
        }
    }
    acc.map(|v| v / (wsum * wsum * wsum))
}

pub fn illustrative_exact(interaction: bool) -> IllustrativeExact {
    // joint[x][u][a] = P(X1=x, U=u, A=a); mu[x][u][j] = P(Y(j)=1 | x, u)
    let mut joint = [[[0.0; 3]; 2]; 2];
    let mut mu = [[[0.0; 3]; 2]; 2];
    for x in 0..2 {
        for u in 0..2 {
            let w = if x == 1 { ILLUS_P_X1 } else { 1.0 - ILLUS_P_X1 } * if u == 1 { ILLUS_P_U } else { 1.0 - ILLUS_P_U };
            let g = illus_mean_gps(x as f64, u as f64);
            for a in 0..3 {
                joint[x][u][a] = w * g[a];
            }
            mu[x][u] = illustrative_mu(interaction, x as f64, u as f64);
        }
    }
    // E[Y(j) | A=a, x ∈ xs] with its normalizer
    let cond = |j: usize, a: usize, xs: &[usize]| -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for &x in xs {
            for u in 0..2 {
                num += joint[x][u][a] * mu[x][u][j];
                den += joint[x][u][a];
            }
        }
        num / den
    };
    let c_over = |xs: &[usize]| -> CMatrix {
        let mut c = CMatrix::zeros(3);
        for j in 0..3 {
            for k in (0..3).filter(|&k| k != j) {
                c.set(j + 1, k + 1, cond(j, j, xs) - cond(j, k, xs));
            }
        }
        c
    };
    let arm_probs: [f64; 3] = std::array::from_fn(|a| (0..2).flat_map(|x| (0..2).map(move |u| (x, u))).map(|(x, u)| joint[x][u][a]).sum());
    let px = [1.0 - ILLUS_P_X1, ILLUS_P_X1];
    let pu = [1.0 - ILLUS_P_U, ILLUS_P_U];
    let mean_potential_given_x1: [[f64; 3]; 2] =
        std::array::from_fn(|x| std::array::from_fn(|j| (0..2).map(|u| pu[u] * mu[x][u][j]).sum()));
    IllustrativeExact {
        arm_probs,
        event_rates: std::array::from_fn(|a| cond(a, a, &[0, 1])),
        mean_potential: std::array::from_fn(|j| (0..2).map(|x| px[x] * mean_potential_given_x1[x][j]).sum()),
        c0: c_over(&[0, 1]),
        gps_given_x1: std::array::from_fn(|x| {
            let tot: f64 = (0..2).flat_map(|u| joint[x][u]).sum();
            std::array::from_fn(|a| (joint[x][0][a] + joint[x][1][a]) / tot)
        }),
        c_given_x1: [c_over(&[0]), c_over(&[1])],
        mean_potential_given_x1,
    }
}

// Contextual DGP: fifteen covariates, nonlinear assignment and outcomes.

pub const CONTEXTUAL_P: usize = 15;

/// Draws one covariate row X1..X15. X9 and X10 are categorical coded 1..3.
pub fn contextual_covariates(r: &mut ChaCha8Rng) -> [f64; CONTEXTUAL_P] {
    let std = Normal::new(0.0, 1.0).expect("valid");
    let bern = |p: f64, r: &mut ChaCha8Rng| if r.random::<f64>() < p { 1.0 } else { 0.0 };
    let x1 = std.sample(r);
    let x2 = r.random_range(-1.0..1.0);
    let x3 = Beta::new(3.0, 3.0).expect("valid").sample(r);
    let x4 = -1.0 + std.sample(r);
    let x5 = 1.0 + std.sample(r);
    let x6 = bern(0.6, r);
    let x7 = bern(0.3, r);
    let x8 = bern(0.5, r);
    let x9 = categorical(r.random(), &[0.3, 0.2, 0.5]) as f64;
    let x10 = categorical(r.random(), &[0.1, 0.8, 0.1]) as f64;
    let x11 = StudentT::new(10.0).expect("valid").sample(r);
    let x12 = Gamma::new(2.0, 0.5).expect("valid").sample(r);
    let x13 = 1.0 / Gamma::new(20.0, 1.0 / 20.0).expect("valid").sample(r);
    let x14 = -1.0 + 2.0 * std.sample(r);
    let x15 = 1.0 + 2.0 * std.sample(r);
    [x1, x2, x3, x4, x5, x6, x7, x8, x9, x10, x11, x12, x13, x14, x15]
}

fn contextual_columns() -> Vec<ColumnMeta> {
    (1..=CONTEXTUAL_P)
        .map(|c| ColumnMeta {
            name: format!("X{c}"),
            kind: match c {
                6..=8 => ColumnKind::Binary,
                9 | 10 => ColumnKind::Ordinal,
                _ => ColumnKind::Continuous,
            },
        })
        .collect()
}

/// Nonlinear terms over 1-based covariate indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Square { column: usize },
    Product { a: usize, b: usize },
    ExpScaled { column: usize, scale: f64 },
    AboveMedian { column: usize, median: f64 },
}

impl Transform {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Transform::Square { column } => x[column - 1] * x[column - 1],
            Transform::Product { a, b } => x[a - 1] * x[b - 1],
            Transform::ExpScaled { column, scale } => (scale * x[column - 1]).exp(),
            Transform::AboveMedian { column, median } => f64::from(u8::from(x[column - 1] > median)),
        }
    }

    fn columns(&self) -> Vec<usize> {
        match *self {
            Transform::Square { column } | Transform::ExpScaled { column, .. } | Transform::AboveMedian { column, .. } => {
                vec![column]
            }
            Transform::Product { a, b } => vec![a, b],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub column: usize,
    pub coef: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearTerm {
    pub transform: Transform,
    pub coef: [f64; 3],
}

/// Per-arm predictor X·β_L + Q(X)·β_NL.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub linear: Vec<Term>,
    pub nonlinear: Vec<NonlinearTerm>,
}

impl LinearPredictor {
    pub fn eval(&self, x: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for t in &self.linear {
            for a in 0..3 {
                out[a] += t.coef[a] * x[t.column - 1];
            }
        }
        for t in &self.nonlinear {
            let v = t.transform.eval(x);
            for a in 0..3 {
                out[a] += t.coef[a] * v;
            }
        }
        out
    }

    fn validate(&self, what: &str) -> Result<(), SimError> {
        let cols = self.linear.iter().map(|t| t.column).chain(self.nonlinear.iter().flat_map(|t| t.transform.columns()));
        for c in cols {
            if c == 0 || c > CONTEXTUAL_P {
                return Err(SimError::Config(format!("{what} references X{c}; covariates are X1..X{CONTEXTUAL_P}")));
            }
        }
        let coefs = self.linear.iter().map(|t| t.coef).chain(self.nonlinear.iter().map(|t| t.coef));
        if coefs.flatten().any(|v| !v.is_finite()) {
            return Err(SimError::Config(format!("{what} has a non-finite coefficient")));
        }
        Ok(())
    }
}

/// Which covariates are withheld from the analyst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UmcLevel {
    I,
    II,
    III,
}

impl UmcLevel {
    /// 1-based indices of the hidden covariates.
    pub fn hidden_columns(self) -> &'static [usize] {
        match self {
            UmcLevel::I => &[4],
            UmcLevel::II => &[13],
            UmcLevel::III => &[14, 15],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Overlap {
    Strong,
    Moderate,
    Weak,
}

impl FromStr for Overlap {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "strong" => Ok(Overlap::Strong),
            "moderate" => Ok(Overlap::Moderate),
            "weak" => Ok(Overlap::Weak),
            _ => Err(SimError::Config(format!("unknown overlap '{s}' (strong, moderate, weak)"))),
        }
    }
}

/// Target allocation across the three arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArmRatio {
    #[serde(rename = "1:1:1")]
    Balanced,
    #[serde(rename = "1:10:9")]
    Registry,
}

impl ArmRatio {
    pub fn shares(self) -> [f64; 3] {
        match self {
            ArmRatio::Balanced => [1.0 / 3.0; 3],
            ArmRatio::Registry => [0.05, 0.5, 0.45],
        }
    }
}

impl FromStr for ArmRatio {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "1:1:1" => Ok(ArmRatio::Balanced),
            "1:10:9" => Ok(ArmRatio::Registry),
            _ => Err(SimError::Config(format!("unknown ratio '{s}' (1:1:1, 1:10:9)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerOverlap<T> {
    pub strong: T,
    pub moderate: T,
    pub weak: T,
}

impl<T: Copy> PerOverlap<T> {
    pub fn get(&self, o: Overlap) -> T {
        match o {
            Overlap::Strong => self.strong,
            Overlap::Moderate => self.moderate,
            Overlap::Weak => self.weak,
        }
    }
}

/// The frozen contextual design, produced by the calibration example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextualDefaults {
    pub assignment: LinearPredictor,
    pub outcome: LinearPredictor,
    pub tau: [f64; 3],
    pub gamma: PerOverlap<f64>,
    pub alpha_balanced: PerOverlap<[f64; 3]>,
    pub alpha_registry: PerOverlap<[f64; 3]>,
    /// Population CATEs for pairs (1,2), (1,3), (2,3).
    pub cate: [f64; 3],
    /// Observed event rates per arm under 1:1:1 and strong overlap.
    pub event_rates: [f64; 3],
}

impl ContextualDefaults {
    pub fn alpha(&self, ratio: ArmRatio, overlap: Overlap) -> [f64; 3] {
        match ratio {
            ArmRatio::Balanced => self.alpha_balanced.get(overlap),
            ArmRatio::Registry => self.alpha_registry.get(overlap),
        }
    }

    pub fn cate(&self, pair: TreatmentPair) -> f64 {
        match (pair.j, pair.k) {
            (1, 2) => self.cate[0],
            (1, 3) => self.cate[1],
            (2, 3) => self.cate[2],
            (2, 1) => -self.cate[0],
            (3, 1) => -self.cate[1],
            (3, 2) => -self.cate[2],
            _ => f64::NAN,
        }
    }
}

pub fn contextual_defaults() -> &'static ContextualDefaults {
    static CELL: OnceLock<ContextualDefaults> = OnceLock::new();
    CELL.get_or_init(|| serde_json::from_str(include_str!("../data/contextual.json")).expect("shipped contextual design parses"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextualDgpConfig {
    pub n: usize,
    pub alpha: [f64; 3],
    pub gamma: f64,
    pub umc: UmcLevel,
    pub assignment: LinearPredictor,
    pub outcome: LinearPredictor,
    pub tau: [f64; 3],
    pub seed: u64,
}

impl ContextualDgpConfig {
    pub fn shipped(n: usize, umc: UmcLevel, ratio: ArmRatio, overlap: Overlap, seed: u64) -> Self {
        let d = contextual_defaults();
        ContextualDgpConfig {
            n,
            alpha: d.alpha(ratio, overlap),
            gamma: d.gamma.get(overlap),
            umc,
            assignment: d.assignment.clone(),
            outcome: d.outcome.clone(),
            tau: d.tau,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n < 100 {
            return Err(SimError::Config(format!("contextual DGP needs n >= 100, got {}", self.n)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) || self.alpha.iter().chain(&self.tau).any(|v| !v.is_finite()) {
            return Err(SimError::Config("alpha, gamma and tau must be finite, gamma >= 0".into()));
        }
        self.assignment.validate("assignment model")?;
        self.outcome.validate("outcome model")
    }

    pub fn gps_row(&self, x: &[f64]) -> [f64; 3] {
        let s = self.assignment.eval(x);
        let l: Vec<f64> = (0..3).map(|a| self.alpha[a] + self.gamma * s[a]).collect();
        let p = softmax(&l);
        [p[0], p[1], p[2]]
    }

    pub fn mu_row(&self, x: &[f64]) -> [f64; 3] {
        let s = self.outcome.eval(x);
        std::array::from_fn(|a| sigmoid(self.tau[a] + s[a]))
    }
}

/// Equal-weight quantile nodes for one hidden covariate.
fn quantile_nodes(column: usize, k: usize) -> Vec<f64> {
    use statrs::distribution::{ContinuousCDF, Gamma as GammaDist, Normal as NormalDist};
    let q = |i: usize| (i as f64 + 0.5) / k as f64;
    (0..k)
        .map(|i| match column {
            4 => NormalDist::new(-1.0, 1.0).expect("valid").inverse_cdf(q(i)),
            13 => 1.0 / GammaDist::new(20.0, 20.0).expect("valid").inverse_cdf(1.0 - q(i)),
            14 => NormalDist::new(-1.0, 2.0).expect("valid").inverse_cdf(q(i)),
            15 => NormalDist::new(1.0, 2.0).expect("valid").inverse_cdf(q(i)),
            _ => unreachable!("only X4, X13, X14, X15 are hidden"),
        })
        .collect()
}

/// Quadrature rule over the hidden covariates of a UMC level.
#[derive(Debug, Clone)]
pub struct HiddenNodes {
    columns: Vec<usize>,
    points: Vec<Vec<f64>>,
    weight: f64,
}

impl ContextualDgpConfig {
    pub fn hidden_nodes(&self) -> HiddenNodes {
        let columns = self.umc.hidden_columns().to_vec();
        let points: Vec<Vec<f64>> = match columns.as_slice() {
            [c] => quantile_nodes(*c, 200).into_iter().map(|v| vec![v]).collect(),
            [a, b] => {
                let (qa, qb) = (quantile_nodes(*a, 48), quantile_nodes(*b, 48));
                qa.iter().flat_map(|&u| qb.iter().map(move |&v| vec![u, v])).collect()
            }
            _ => unreachable!(),
        };
        let weight = 1.0 / points.len() as f64;
        HiddenNodes { columns, points, weight }
    }

    /// P(A=l | observed x) and E[Y(j) | A=l, observed x] as `m[l][j]`,
    /// integrating the hidden covariates. Hidden entries of `x` are ignored.
    pub fn observed_conditionals(&self, x: &[f64], nodes: &HiddenNodes) -> ([f64; 3], [[f64; 3]; 3]) {
        let mut row = x.to_vec();
        let mut p = [0.0; 3];
        let mut m = [[0.0; 3]; 3];
        for pt in &nodes.points {
            for (c, v) in nodes.columns.iter().zip(pt) {
                row[c - 1] = *v;
            }
            let g = self.gps_row(&row);
            let mu = self.mu_row(&row);
            for l in 0..3 {
                p[l] += nodes.weight * g[l];
                for j in 0..3 {
                    m[l][j] += nodes.weight * g[l] * mu[j];
                }
            }
        }
        for l in 0..3 {
            for j in 0..3 {
                m[l][j] /= p[l];
            }
        }
        (p, m)
    }
}

pub fn gen_contextual(cfg: &ContextualDgpConfig) -> Result<SyntheticTruth, SimError> {
    cfg.validate()?;
    let n = cfg.n;
    let mut r = rng::stream(cfg.seed, &[rng::domain::DGP]);
    let mut d = Draws {
        columns: contextual_columns(),
        x: Vec::with_capacity(n * CONTEXTUAL_P),
        hidden: cfg.umc.hidden_columns().iter().map(|c| c - 1).collect(),
        arms: Vec::with_capacity(n),
        potential: Vec::with_capacity(3 * n),
        mu: Vec::with_capacity(3 * n),
        gps: Vec::with_capacity(3 * n),
    };
    for _ in 0..n {
        let x = contextual_covariates(&mut r);
        let p = cfg.gps_row(&x);
        let a = categorical(r.random(), &p);
        let mu = cfg.mu_row(&x);
        for m in mu {
            d.potential.push(u8::from(r.random::<f64>() < m));
        }
        d.x.extend(x);
        d.arms.push(a);
        d.mu.extend(mu);
        d.gps.extend(p);
    }
    let config = serde_json::to_value(cfg).map_err(|e| SimError::Config(e.to_string()))?;
    SyntheticTruth::assemble(d, 3, config, Dgp::Contextual(Box::new(cfg.clone())))
}

// Metrics.

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub aab: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_width: f64,
    pub reps: usize,
}

/// AAB, RMSE and interval coverage of per-replication summaries against one truth.
pub fn metrics(estimates: &[Summary], truth: f64) -> Result<Metrics, SimError> {
    let pairs: Vec<(Summary, f64)> = estimates.iter().map(|s| (*s, truth)).collect();
    metrics_against(&pairs)
}

/// As [`metrics`] with a truth per replication.
pub fn metrics_against(estimates: &[(Summary, f64)]) -> Result<Metrics, SimError> {
    if estimates.is_empty() {
        return Err(SimError::Config("metrics need at least one replication".into()));
    }
    let r = estimates.len() as f64;
    let mean = |f: &dyn Fn(&(Summary, f64)) -> f64| estimates.iter().map(f).sum::<f64>() / r;
    Ok(Metrics {
        aab: mean(&|(s, t)| (s.mean - t).abs()),
        rmse: mean(&|(s, t)| (s.mean - t).powi(2)).sqrt(),
        coverage: mean(&|(s, t)| f64::from(u8::from(s.covers(*t)))),
        mean_width: mean(&|(s, _)| s.width()),
        reps: estimates.len(),
    })
}

// Contour grids.

pub const MAX_CONTOUR_CELLS: usize = 10_000;

/// Evenly spaced values from `lo` to `hi` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Axis {
    pub fn point(v: f64) -> Self {
        Axis { lo: v, hi: v, step: 1.0 }
    }

    pub fn len(&self) -> Result<usize, SimError> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(SimError::Config(format!("axis [{}, {}] is empty or not finite", self.lo, self.hi)));
        }
        if self.lo < -1.0 || self.hi > 1.0 {
            return Err(SimError::Config(format!("axis [{}, {}] leaves the natural bounds [-1, 1]", self.lo, self.hi)));
        }
        if self.lo == self.hi {
            return Ok(1);
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(SimError::Config(format!("axis step must be positive, got {}", self.step)));
        }
        let steps = ((self.hi - self.lo) / self.step + 1e-9).floor();
        if steps > 1e7 {
            return Ok(usize::MAX);
        }
        Ok(steps as usize + 1)
    }

    pub fn points(&self) -> Result<Vec<f64>, SimError> {
        let n = self.len()?;
        Ok((0..n).map(|i| ((self.lo + i as f64 * self.step) * 1e12).round() / 1e12).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourGrid {
    pub jk: Axis,
    pub kj: Axis,
}

impl ContourGrid {
    pub fn cells(&self) -> Result<usize, SimError> {
        Ok(self.jk.len()?.saturating_mul(self.kj.len()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContourCell {
    pub c_jk: f64,
    pub c_kj: f64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Adjusted effect of `pair` at each grid point, with point masses on
/// c(j,k) and c(k,j) and `other` elsewhere. One GPS fit serves every cell.
pub fn contour_grid(
    ds: &ObservationalDataset,
    pair: TreatmentPair,
    grid: &ContourGrid,
    other: &ConfoundingSpec,
    cfg: &EngineConfig,
    progress: Option<engine::Progress>,
) -> Result<Vec<ContourCell>, SimError> {
    check_grid(grid, cfg)?;
    other.check_against(ds)?;
    let gps = gps::fit_gps(ds, &cfg.gps, cfg.m1, cfg.gps_seed())?;
    contour_grid_with_draws(ds, &gps, pair, grid, other, cfg, progress)
}

fn check_grid(grid: &ContourGrid, cfg: &EngineConfig) -> Result<(), SimError> {
    let cells = grid.cells()?;
    if cells > MAX_CONTOUR_CELLS {
        return Err(SimError::GridTooFine {
            cells,
            limit: MAX_CONTOUR_CELLS,
            fits: cells.saturating_mul(cfg.m1.max(1) * cfg.m2.max(1)),
        });
    }
    Ok(())
}

pub fn contour_grid_with_draws(
    ds: &ObservationalDataset,
    gps: &GpsDraws,
    pair: TreatmentPair,
    grid: &ContourGrid,
    other: &ConfoundingSpec,
    cfg: &EngineConfig,
    progress: Option<engine::Progress>,
) -> Result<Vec<ContourCell>, SimError> {
    check_grid(grid, cfg)?;
    TreatmentPair::new(pair.j, pair.k, ds.n_arms())?;
    let (xs, ys) = (grid.jk.points()?, grid.kj.points()?);
    let total = xs.len() * ys.len();
    let mut out = Vec::with_capacity(total);
    for &a in &xs {
        for &b in &ys {
            let spec = other.clone().with(pair.j, pair.k, PriorSpec::point(a))?.with(pair.k, pair.j, PriorSpec::point(b))?;
            let post = engine::run_with_draws(ds, &spec, gps, cfg, None)?;
            let s = post.summary(pair).expect("pair validated");
            out.push(ContourCell { c_jk: a, c_kj: b, estimate: s.mean, lower: s.lower, upper: s.upper });
            if let Some(cb) = progress {
                cb(out.len(), total);
            }
        }
    }
    Ok(out)
}

// Replication harness.

/// Named data-generating settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Scenario {
    Illustrative,
    IllustrativeNointeraction,
    Contextual { umc: UmcLevel, overlap: Overlap, ratio: ArmRatio },
}

impl Scenario {
    /// Parses `illustrative`, `illustrative-nointeraction` or `contextual-umc1|2|3`.
    pub fn parse(name: &str, overlap: Overlap, ratio: ArmRatio) -> Result<Self, SimError> {
        let umc = match name {
            "illustrative" => return Ok(Scenario::Illustrative),
            "illustrative-nointeraction" => return Ok(Scenario::IllustrativeNointeraction),
            "contextual-umc1" => UmcLevel::I,
            "contextual-umc2" => UmcLevel::II,
            "contextual-umc3" => UmcLevel::III,
            _ => {
                return Err(SimError::Config(format!(
                    "unknown scenario '{name}' (illustrative, illustrative-nointeraction, contextual-umc1, contextual-umc2, contextual-umc3)"
                )))
            }
        };
        Ok(Scenario::Contextual { umc, overlap, ratio })
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<SyntheticTruth, SimError> {
        match *self {
            Scenario::Illustrative => gen_illustrative(n, true, seed),
            Scenario::IllustrativeNointeraction => gen_illustrative(n, false, seed),
            Scenario::Contextual { umc, overlap, ratio } => {
                gen_contextual(&ContextualDgpConfig::shipped(n, umc, ratio, overlap, seed))
            }
        }
    }

    pub fn population_cate(&self, pair: TreatmentPair) -> f64 {
        match self {
            Scenario::Illustrative => illustrative_exact(true).cate(pair),
            Scenario::IllustrativeNointeraction => illustrative_exact(false).cate(pair),
            Scenario::Contextual { .. } => contextual_defaults().cate(pair),
        }
    }

    pub fn gps_model(&self) -> GpsModel {
        match self {
            Scenario::Contextual { .. } => GpsModel::Multilogit(MultilogitConfig::default()),
            _ => GpsModel::Stratified { columns: vec![0], prior_weight: 1.0 },
        }
    }
}

/// How each replication's analysis is specified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SimStrategy {
    /// Hidden covariates ignored, c ≡ 0.
    Naive,
    /// Hidden covariates supplied, c ≡ 0.
    Oracle,
    /// Point masses at the scalar summary c̄ of the conditional confounding function.
    TrueC0,
    /// Point masses at the marginal c0 = mean(Y(j)|A=j) − mean(Y(j)|A=k).
    TrueC0Marginal,
    /// Point masses at the realized c within levels of the first covariate.
    TrueCStratified,
    /// True c0 for the target pair, zero for functions involving the third arm.
    ThirdIgnored,
    /// Band of ±hσ̂ around c0.
    Band { h: f64, shape: Shape },
    /// One-sided band of width 2hσ̂.
    GoalPost { direction: Direction, h: f64, shape: Shape },
    /// U(−1, 1) everywhere.
    NaturalBounds,
}

impl fmt::Display for SimStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tn = |s: &Shape| if *s == Shape::TruncNormal { "-tn" } else { "" };
        match self {
            SimStrategy::Naive => write!(f, "naive"),
            SimStrategy::Oracle => write!(f, "oracle"),
            SimStrategy::TrueC0 => write!(f, "I"),
            SimStrategy::TrueC0Marginal => write!(f, "I-marginal"),
            SimStrategy::TrueCStratified => write!(f, "I-strat"),
            SimStrategy::ThirdIgnored => write!(f, "I-3rd-ignored"),
            SimStrategy::Band { h, shape } => write!(f, "II-h{h}{}", tn(shape)),
            SimStrategy::GoalPost { direction: Direction::Below, h, shape } => write!(f, "III-below-h{h}{}", tn(shape)),
            SimStrategy::GoalPost { direction: Direction::Above, h, shape } => write!(f, "III-above-h{h}{}", tn(shape)),
            SimStrategy::NaturalBounds => write!(f, "IV"),
        }
    }
}

impl FromStr for SimStrategy {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        let bad = || SimError::Config(format!("unknown strategy '{s}' (naive, oracle, I, I-marginal, I-strat, I-3rd-ignored, II-h<h>, III-below[-h<h>], III-above[-h<h>], IV; append -tn for truncated normal)"));
        let (body, shape) = match s.strip_suffix("-tn") {
            Some(b) => (b, Shape::TruncNormal),
            None => (s, Shape::Uniform),
        };
        let h_of = |rest: &str| -> Result<f64, SimError> {
            match rest {
                "" => Ok(1.0),
                r => r.strip_prefix("-h").and_then(|v| v.parse::<f64>().ok()).filter(|h| *h > 0.0).ok_or_else(bad),
            }
        };
        Ok(match body {
            "naive" => SimStrategy::Naive,
            "oracle" => SimStrategy::Oracle,
            "I" => SimStrategy::TrueC0,
            "I-marginal" => SimStrategy::TrueC0Marginal,
            "I-strat" => SimStrategy::TrueCStratified,
            "I-3rd-ignored" => SimStrategy::ThirdIgnored,
            "IV" => SimStrategy::NaturalBounds,
            b if b.starts_with("II-h") => SimStrategy::Band { h: h_of(&b[2..])?, shape },
            b if b.starts_with("III-below") => {
                SimStrategy::GoalPost { direction: Direction::Below, h: h_of(&b["III-below".len()..])?, shape }
            }
            b if b.starts_with("III-above") => {
                SimStrategy::GoalPost { direction: Direction::Above, h: h_of(&b["III-above".len()..])?, shape }
            }
            _ => return Err(bad()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub reps: usize,
    pub m1: usize,
    pub m2: usize,
    pub trees: SumOfTreesConfig,
    pub strategies: Vec<SimStrategy>,
    pub seed: u64,
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub strategy: String,
    pub pair: TreatmentPair,
    pub summary: Summary,
    pub truth: f64,
    pub sample_truth: f64,
    /// c̄(j,k) and c̄(k,j) of this replication.
    pub c_jk: f64,
    pub c_kj: f64,
}

/// Per-(strategy, pair) metrics against the population truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub strategy: String,
    pub pair: TreatmentPair,
    pub truth: f64,
    pub metrics: Metrics,
}

/// Prior set for one strategy. `c0` is the scalar truth the strategies
/// center on (normally [`SyntheticTruth::true_c_bar`]).
pub fn strategy_spec(
    strategy: SimStrategy,
    truth: &SyntheticTruth,
    c0: &CMatrix,
    sigma_hat: f64,
    target: Option<TreatmentPair>,
) -> Result<ConfoundingSpec, SimError> {
    let j = truth.n_arms();
    let mut spec = ConfoundingSpec::new(j);
    let each = |spec: &mut ConfoundingSpec, f: &dyn Fn(usize, usize) -> PriorSpec| -> Result<(), SimError> {
        for a in 1..=j {
            for l in (1..=j).filter(|&l| l != a) {
                spec.set(a, l, f(a, l))?;
            }
        }
        Ok(())
    };
    match strategy {
        SimStrategy::Naive | SimStrategy::Oracle => {}
        SimStrategy::TrueC0 => each(&mut spec, &|a, l| PriorSpec::point(c0.get(a, l)))?,
        SimStrategy::TrueC0Marginal => {
            let m = truth.c0_matrix();
            each(&mut spec, &|a, l| PriorSpec::point(m.get(a, l)))?
        }
        SimStrategy::TrueCStratified => {
            let meta = &truth.observed().columns()[0];
            if !meta.kind.is_discrete() {
                return Err(SimError::Config(format!("I-strat needs a discrete first covariate, '{}' is continuous", meta.name)));
            }
            each(&mut spec, &|a, l| {
                let strata = truth
                    .true_c_stratified(TreatmentPair { j: a, k: l }, 0)
                    .into_iter()
                    .map(|(k, v)| (k, PriorSpec::point(if v.is_finite() { v } else { 0.0 })))
                    .collect();
                PriorSpec::Stratified { column: 0, strata }
            })?
        }
        SimStrategy::ThirdIgnored => {
            let p = target.ok_or_else(|| SimError::Config("I-3rd-ignored needs a target pair".into()))?;
            spec.set(p.j, p.k, PriorSpec::point(c0.get(p.j, p.k)))?;
            spec.set(p.k, p.j, PriorSpec::point(c0.get(p.k, p.j)))?;
        }
        SimStrategy::Band { h, shape } => {
            each(&mut spec, &|a, l| build_strategy_shaped(Strategy::II, c0.get(a, l), h, sigma_hat, shape))?
        }
        SimStrategy::GoalPost { direction, h, shape } => each(&mut spec, &|a, l| {
            build_strategy_shaped(Strategy::III(direction), c0.get(a, l), h, sigma_hat, shape)
        })?,
        SimStrategy::NaturalBounds => each(&mut spec, &|_, _| PriorSpec::uniform(-1.0, 1.0))?,
    }
    Ok(spec)
}

fn uniform_gps(n: usize, j: usize) -> Result<GpsDraws, SimError> {
    Ok(GpsDraws::from_values(1, n, j, vec![1.0 / j as f64; n * j], "none", 0)?)
}

/// Runs one replication under every strategy in `cfg`.
pub fn run_replication(cfg: &SimulationConfig, rep: usize) -> Result<Vec<ReplicationRecord>, SimError> {
    let data_seed = rng::derive_seed(cfg.seed, &[rng::domain::REPLICATION, rep as u64, rng::domain::DGP]);
    let truth = cfg.scenario.generate(cfg.n, data_seed)?;
    let ds = truth.observed();
    let j = ds.n_arms();
    let pairs = TreatmentPair::all(j);
    let engine_seed = rng::derive_seed(cfg.seed, &[rng::domain::REPLICATION, rep as u64, rng::domain::OUTCOME_FIT]);
    let base = EngineConfig {
        jobs: 0,
        ..EngineConfig::new(cfg.m1, cfg.m2, cfg.scenario.gps_model(), cfg.trees.clone(), engine_seed)
    };
    let needs_gps = cfg.strategies.iter().any(|s| !matches!(s, SimStrategy::Naive | SimStrategy::Oracle));
    let fitted_gps = if needs_gps { Some(gps::fit_gps(ds, &base.gps, cfg.m1, base.gps_seed())?) } else { None };
    let sigma_hat = if needs_gps { confounding::residual_sd(ds)? } else { f64::NAN };
    let c0 = if needs_gps { truth.true_c_bar() } else { CMatrix::zeros(j) };
    let mut out = Vec::new();
    let mut push = |strategy: SimStrategy, pair: TreatmentPair, summary: Summary| {
        out.push(ReplicationRecord {
            rep,
            strategy: strategy.to_string(),
            pair,
            summary,
            truth: cfg.scenario.population_cate(pair),
            sample_truth: truth.sample_cate(pair),
            c_jk: c0.get(pair.j, pair.k),
            c_kj: c0.get(pair.k, pair.j),
        })
    };
    for &strategy in &cfg.strategies {
        match strategy {
            SimStrategy::Naive | SimStrategy::Oracle => {
                let data = if strategy == SimStrategy::Naive { ds } else { truth.oracle() };
                let single = EngineConfig { m1: 1, m2: 1, ..base.clone() };
                let post = engine::run_with_draws(data, &ConfoundingSpec::new(j), &uniform_gps(data.n(), j)?, &single, None)?;
                for &p in &pairs {
                    push(strategy, p, post.summary(p).expect("all pairs present"));
                }
            }
            SimStrategy::ThirdIgnored => {
                for &p in &pairs {
                    let spec = strategy_spec(strategy, &truth, &c0, sigma_hat, Some(p))?;
                    let post = engine::run_with_draws(ds, &spec, fitted_gps.as_ref().expect("fitted"), &base, None)?;
                    push(strategy, p, post.summary(p).expect("all pairs present"));
                }
            }
            _ => {
                let spec = strategy_spec(strategy, &truth, &c0, sigma_hat, None)?;
                let post = engine::run_with_draws(ds, &spec, fitted_gps.as_ref().expect("fitted"), &base, None)?;
                for &p in &pairs {
                    push(strategy, p, post.summary(p).expect("all pairs present"));
                }
            }
        }
    }
    Ok(out)
}

/// Runs all replications in parallel; records come back in (rep, strategy, pair) order.
pub fn run_replications(
    cfg: &SimulationConfig,
    progress: Option<engine::Progress>,
) -> Result<Vec<ReplicationRecord>, SimError> {
    if cfg.reps == 0 || cfg.strategies.is_empty() {
        return Err(SimError::Config("need at least one replication and one strategy".into()));
    }
    let done = std::sync::atomic::AtomicUsize::new(0);
    let work = || -> Result<Vec<ReplicationRecord>, SimError> {
        let per: Vec<Vec<ReplicationRecord>> = (0..cfg.reps)
            .into_par_iter()
            .map(|rep| {
                let r = run_replication(cfg, rep);
                if let Some(cb) = progress {
                    cb(done.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1, cfg.reps);
                }
                r
            })
            .collect::<Result<_, _>>()?;
        Ok(per.into_iter().flatten().collect())
    };
    if cfg.jobs == 0 {
        return work();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build() {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    }
}

/// Groups records by (strategy, pair), keeping first-seen strategy order.
pub fn metric_table(records: &[ReplicationRecord]) -> Result<Vec<MetricRow>, SimError> {
    let mut order: Vec<(String, TreatmentPair)> = Vec::new();
    let mut groups: BTreeMap<(String, TreatmentPair), Vec<(Summary, f64)>> = BTreeMap::new();
    for r in records {
        let key = (r.strategy.clone(), r.pair);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push((r.summary, r.truth));
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            Ok(MetricRow { truth: g[0].1, metrics: metrics_against(g)?, strategy: key.0, pair: key.1 })
        })
        .collect()
}

pub fn write_metric_csv<W: std::io::Write>(rows: &[MetricRow], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["strategy", "pair", "truth", "aab", "rmse", "coverage", "mean_width", "reps"])?;
    for r in rows {
        out.write_record([
            r.strategy.clone(),
            format!("{}-{}", r.pair.j, r.pair.k),
            r.truth.to_string(),
            r.metrics.aab.to_string(),
            r.metrics.rmse.to_string(),
            r.metrics.coverage.to_string(),
            r.metrics.mean_width.to_string(),
            r.metrics.reps.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_replication_csv<W: std::io::Write>(records: &[ReplicationRecord], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["rep", "strategy", "pair", "mean", "lower", "upper", "truth", "sample_truth", "c_jk", "c_kj"])?;
    for r in records {
        out.write_record([
            r.rep.to_string(),
            r.strategy.clone(),
            format!("{}-{}", r.pair.j, r.pair.k),
            r.summary.mean.to_string(),
            r.summary.lower.to_string(),
            r.summary.upper.to_string(),
            r.truth.to_string(),
            r.sample_truth.to_string(),
            r.c_jk.to_string(),
            r.c_kj.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
