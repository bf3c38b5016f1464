//! Bayesian sum-of-trees regression for continuous responses.
//!
//! Covariates are binned once against per-column cutpoint grids. Units with
//! identical bin vectors are merged into groups carrying `(count, Σy, Σy²)`,
//! which are exact sufficient statistics for every tree update, so one MCMC
//! sweep costs O(groups) instead of O(units).

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("need at least 10 units, got {0}")]
    TooFewUnits(usize),
    #[error("response value {value} at unit {index} is not finite")]
    NonFinite { index: usize, value: f64 },
    #[error("invalid sum-of-trees configuration: {0}")]
    Config(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("model dump: {0}")]
    Dump(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumOfTreesConfig {
    pub trees: usize,
    pub burn_in: usize,
    pub keep: usize,
    /// Leaf prior: τ = 0.5 / (kappa·√trees) on the scaled response.
    pub kappa: f64,
    pub sigma_df: f64,
    pub sigma_quantile: f64,
    pub base: f64,
    pub power: f64,
    pub n_cuts: usize,
    pub seed: u64,
    /// Store every kept ensemble so `predict_draws` works.
    #[serde(default = "yes")]
    pub keep_trees: bool,
}

fn yes() -> bool {
    true
}

impl Default for SumOfTreesConfig {
    fn default() -> Self {
        SumOfTreesConfig {
            trees: 200,
            burn_in: 250,
            keep: 1000,
            kappa: 2.0,
            sigma_df: 3.0,
            sigma_quantile: 0.90,
            base: 0.95,
            power: 2.0,
            n_cuts: 100,
            seed: 0,
            keep_trees: true,
        }
    }
}

impl SumOfTreesConfig {
    pub fn fast() -> Self {
        SumOfTreesConfig { trees: 50, burn_in: 100, keep: 250, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        let bad = |m: String| Err(TreeError::Config(m));
        if self.trees == 0 {
            return bad("trees must be at least 1".into());
        }
        if self.keep == 0 {
            return bad("keep must be at least 1".into());
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa must be positive, got {}", self.kappa));
        }
        if !(self.base > 0.0 && self.base < 1.0) {
            return bad(format!("base must lie in (0, 1), got {}", self.base));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return bad(format!("power must be positive, got {}", self.power));
        }
        if !(self.sigma_df > 0.0 && self.sigma_df.is_finite()) {
            return bad(format!("sigma_df must be positive, got {}", self.sigma_df));
        }
        if !(self.sigma_quantile > 0.0 && self.sigma_quantile < 1.0) {
            return bad(format!("sigma_quantile must lie in (0, 1), got {}", self.sigma_quantile));
        }
        if self.n_cuts == 0 || self.n_cuts > u16::MAX as usize - 1 {
            return bad(format!("n_cuts must lie in 1..{}, got {}", u16::MAX - 1, self.n_cuts));
        }
        Ok(())
    }
}

/// Cutpoints for one column: midpoints between unique values when there are
/// few of them, otherwise an even interior grid.
pub fn cutpoints(values: &[f64], n_cuts: usize) -> Vec<f64> {
    let mut u: Vec<f64> = values.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    if u.len() <= 1 {
        return Vec::new();
    }
    if u.len() <= n_cuts + 1 {
        return u.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let (lo, hi) = (u[0], u[u.len() - 1]);
    (1..=n_cuts).map(|k| lo + (hi - lo) * k as f64 / (n_cuts + 1) as f64).collect()
}

/// Number of cuts `<= x`; the rule at cut index `c` sends `x` left iff `bin <= c`.
#[inline]
fn bin_of(cuts: &[f64], x: f64) -> u16 {
    cuts.partition_point(|&c| c <= x) as u16
}

/// Weighted sets of prediction rows tracked during sampling.
#[derive(Debug, Clone, Default)]
struct Targets {
    /// Distinct binned rows, row-major R×p.
    bins: Vec<u16>,
    rows: usize,
    /// Per set, (row, weight) pairs with rows merged.
    sets: Vec<Vec<(u32, f64)>>,
}

/// Binned covariates, grouped units and optional prediction targets.
#[derive(Debug, Clone)]
pub struct Design {
    n: usize,
    p: usize,
    cuts: Vec<Vec<f64>>,
    /// Row-major G×p bins.
    bins: Vec<u16>,
    groups: usize,
    group_of: Vec<u32>,
    group_count: Vec<f64>,
    targets: Targets,
}

impl Design {
    /// Builds cutpoints and groups from a row-major n×p matrix.
    pub fn new(x: &[f64], n: usize, p: usize, n_cuts: usize) -> Result<Self, TreeError> {
        if x.len() != n * p || p == 0 {
            return Err(TreeError::Schema(format!("{} cells for {n}x{p}", x.len())));
        }
        if n < 10 {
            return Err(TreeError::TooFewUnits(n));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(TreeError::Schema(format!("covariate at unit {} column {} is not finite", pos / p, pos % p)));
        }
        let cuts: Vec<Vec<f64>> = (0..p)
            .map(|c| cutpoints(&(0..n).map(|i| x[i * p + c]).collect::<Vec<_>>(), n_cuts))
            .collect();
        let mut index: HashMap<Vec<u16>, u32> = HashMap::new();
        let mut bins = Vec::new();
        let mut group_of = Vec::with_capacity(n);
        let mut group_count = Vec::new();
        let mut key = vec![0u16; p];
        for i in 0..n {
            for c in 0..p {
                key[c] = bin_of(&cuts[c], x[i * p + c]);
            }
            let g = *index.entry(key.clone()).or_insert_with(|| {
                bins.extend_from_slice(&key);
                group_count.push(0.0);
                (group_count.len() - 1) as u32
            });
            group_count[g as usize] += 1.0;
            group_of.push(g);
        }
        let groups = group_count.len();
        Ok(Design { n, p, cuts, bins, groups, group_of, group_count, targets: Targets::default() })
    }

    /// Registers weighted prediction sets over the rows of `x_new` (m×p).
    /// Each set's weighted sum is recorded at every kept iteration.
    pub fn with_targets(mut self, x_new: &[f64], m: usize, sets: Vec<Vec<(usize, f64)>>) -> Result<Self, TreeError> {
        if x_new.len() != m * self.p {
            return Err(TreeError::Schema(format!("{} target cells for {m}x{}", x_new.len(), self.p)));
        }
        let mut index: HashMap<Vec<u16>, u32> = HashMap::new();
        let mut bins = Vec::new();
        let mut row_of = Vec::with_capacity(m);
        let mut key = vec![0u16; self.p];
        for i in 0..m {
            for c in 0..self.p {
                key[c] = bin_of(&self.cuts[c], x_new[i * self.p + c]);
            }
            let next = index.len() as u32;
            let r = *index.entry(key.clone()).or_insert_with(|| {
                bins.extend_from_slice(&key);
                next
            });
            row_of.push(r);
        }
        let mut merged = Vec::with_capacity(sets.len());
        for set in sets {
            let mut acc: HashMap<u32, f64> = HashMap::new();
            for (row, w) in set {
                if row >= m {
                    return Err(TreeError::Schema(format!("target row {row} out of range {m}")));
                }
                *acc.entry(row_of[row]).or_insert(0.0) += w;
            }
            let mut v: Vec<(u32, f64)> = acc.into_iter().collect();
            v.sort_by_key(|e| e.0);
            merged.push(v);
        }
        self.targets = Targets { bins, rows: index.len(), sets: merged };
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn groups(&self) -> usize {
        self.groups
    }
    pub fn cuts(&self) -> &[Vec<f64>] {
        &self.cuts
    }
    pub fn target_sets(&self) -> usize {
        self.targets.sets.len()
    }
}

/// Affine map of the response onto [−0.5, 0.5].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub min: f64,
    pub range: f64,
}

impl Scaling {
    pub fn from_data(y: &[f64]) -> (Self, bool) {
        let min = y.iter().copied().fold(f64::INFINITY, f64::min);
        let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        if range <= 1e-12 * max.abs().max(1.0) {
            (Scaling { min: min - 0.5, range: 1.0 }, true)
        } else {
            (Scaling { min, range }, false)
        }
    }
    #[inline]
    pub fn scale(&self, y: f64) -> f64 {
        (y - self.min) / self.range - 0.5
    }
    #[inline]
    pub fn unscale(&self, s: f64) -> f64 {
        (s + 0.5) * self.range + self.min
    }
}

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Node {
    var: u32,
    cut: u32,
    left: u32,
    right: u32,
    parent: u32,
    depth: u32,
    value: f64,
    leaf: bool,
    alive: bool,
}

impl Node {
    fn leaf(parent: u32, depth: u32) -> Self {
        Node { var: 0, cut: 0, left: NONE, right: NONE, parent, depth, value: 0.0, leaf: true, alive: true }
    }
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
    free: Vec<u32>,
}

impl Tree {
    fn stump() -> Self {
        Tree { nodes: vec![Node::leaf(NONE, 0)], free: Vec::new() }
    }

    fn alloc(&mut self, node: Node) -> u32 {
        match self.free.pop() {
            Some(i) => {
                self.nodes[i as usize] = node;
                i
            }
            None => {
                self.nodes.push(node);
                (self.nodes.len() - 1) as u32
            }
        }
    }

    fn is_stump(&self) -> bool {
        self.nodes[0].leaf
    }

    fn leaves(&self) -> Vec<u32> {
        (0..self.nodes.len() as u32).filter(|&i| self.nodes[i as usize].alive && self.nodes[i as usize].leaf).collect()
    }

    fn is_nog(&self, i: u32) -> bool {
        let n = &self.nodes[i as usize];
        n.alive && !n.leaf && self.nodes[n.left as usize].leaf && self.nodes[n.right as usize].leaf
    }

    fn nogs(&self) -> Vec<u32> {
        (0..self.nodes.len() as u32).filter(|&i| self.is_nog(i)).collect()
    }

    fn max_depth(&self) -> u32 {
        self.nodes.iter().filter(|n| n.alive && n.leaf).map(|n| n.depth).max().unwrap_or(0)
    }

    /// Available cut-index interval `[lo, hi)` per column at `node`.
    fn ranges(&self, node: u32, n_cuts: &[u32], out: &mut Vec<(u32, u32)>) {
        out.clear();
        out.extend(n_cuts.iter().map(|&k| (0, k)));
        let mut child = node;
        let mut parent = self.nodes[node as usize].parent;
        while parent != NONE {
            let pn = &self.nodes[parent as usize];
            let r = &mut out[pn.var as usize];
            if pn.left == child {
                r.1 = r.1.min(pn.cut);
            } else {
                r.0 = r.0.max(pn.cut + 1);
            }
            child = parent;
            parent = pn.parent;
        }
    }

    /// Leaf reached by a binned row.
    fn find_leaf(&self, bins: &[u16]) -> u32 {
        let mut i = 0u32;
        loop {
            let n = &self.nodes[i as usize];
            if n.leaf {
                return i;
            }
            i = if (bins[n.var as usize] as u32) <= n.cut { n.left } else { n.right };
        }
    }

    fn compact(&self) -> CompactTree {
        let mut out = Vec::new();
        fn walk(t: &Tree, i: u32, out: &mut Vec<CompactNode>) -> u32 {
            let pos = out.len() as u32;
            let n = t.nodes[i as usize];
            out.push(CompactNode { var: n.var, cut: n.cut, left: NONE, right: NONE, value: n.value });
            if !n.leaf {
                let l = walk(t, n.left, out);
                let r = walk(t, n.right, out);
                out[pos as usize].left = l;
                out[pos as usize].right = r;
            }
            pos
        }
        walk(self, 0, &mut out);
        CompactTree { nodes: out }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CompactNode {
    var: u32,
    cut: u32,
    left: u32,
    right: u32,
    value: f64,
}

/// A stored tree in preorder; `left == u32::MAX` marks a leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactTree {
    nodes: Vec<CompactNode>,
}

impl CompactTree {
    fn eval(&self, cuts: &[Vec<f64>], x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.left == NONE {
                return n.value;
            }
            i = if x[n.var as usize] < cuts[n.var as usize][n.cut as usize] { n.left } else { n.right } as usize;
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.left == NONE).count()
    }
}

/// MH bookkeeping for one fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub grow_proposed: u64,
    pub grow_accepted: u64,
    pub prune_proposed: u64,
    pub prune_accepted: u64,
    pub change_proposed: u64,
    pub change_accepted: u64,
    /// Mean over kept iterations of the average tree depth.
    pub mean_depth: f64,
    /// Mean over kept iterations of the average leaf count.
    pub mean_leaves: f64,
    pub groups: usize,
}

/// A fitted posterior over sum-of-trees ensembles.
#[derive(Debug, Clone)]
pub struct SumOfTreesModel {
    config: SumOfTreesConfig,
    scaling: Scaling,
    p: usize,
    cuts: Vec<Vec<f64>>,
    ensembles: Vec<Vec<CompactTree>>,
    sigma: Vec<f64>,
    sigma_burn: Vec<f64>,
    target_draws: Vec<Vec<f64>>,
    diagnostics: Diagnostics,
    degenerate: bool,
}

/// Floor for σ on the scaled response.
pub const SIGMA_FLOOR: f64 = 1e-6;

impl SumOfTreesModel {
    pub fn config(&self) -> &SumOfTreesConfig {
        &self.config
    }
    pub fn scaling(&self) -> Scaling {
        self.scaling
    }
    /// Kept σ draws on the response scale.
    pub fn sigma_draws(&self) -> &[f64] {
        &self.sigma
    }
    pub fn sigma_burn_in(&self) -> &[f64] {
        &self.sigma_burn
    }
    /// K × (number of target sets) weighted sums, on the response scale.
    pub fn target_draws(&self) -> &[Vec<f64>] {
        &self.target_draws
    }
    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }
    /// True when the response had zero variance and no trees were grown.
    pub fn degenerate(&self) -> bool {
        self.degenerate
    }
    pub fn kept(&self) -> usize {
        self.sigma.len()
    }
    pub fn ensembles(&self) -> &[Vec<CompactTree>] {
        &self.ensembles
    }

    /// K×m posterior draws at the rows of `x_new` (row-major m×p).
    pub fn predict_draws(&self, x_new: &[f64], m: usize) -> Result<Vec<Vec<f64>>, TreeError> {
        if x_new.len() != m * self.p {
            return Err(TreeError::Schema(format!("{} cells for {m} rows of width {}", x_new.len(), self.p)));
        }
        if self.ensembles.is_empty() {
            return Err(TreeError::Schema("model was fitted without keep_trees".into()));
        }
        Ok(self
            .ensembles
            .iter()
            .map(|trees| {
                (0..m)
                    .map(|i| {
                        let x = &x_new[i * self.p..(i + 1) * self.p];
                        let s: f64 = trees.iter().map(|t| t.eval(&self.cuts, x)).sum();
                        self.scaling.unscale(s)
                    })
                    .collect()
            })
            .collect())
    }

    /// Posterior mean at the rows of `x_new`.
    pub fn predict_mean(&self, x_new: &[f64], m: usize) -> Result<Vec<f64>, TreeError> {
        let draws = self.predict_draws(x_new, m)?;
        let k = draws.len() as f64;
        Ok((0..m).map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / k).collect())
    }

    /// Writes trees and σ draws in a versioned binary layout.
    pub fn dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"SOTM")?;
        w.write_all(&1u32.to_le_bytes())?;
        for v in [self.p, self.ensembles.len(), self.config.trees, self.sigma.len()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.scaling.min.to_le_bytes())?;
        w.write_all(&self.scaling.range.to_le_bytes())?;
        for cuts in &self.cuts {
            w.write_all(&(cuts.len() as u64).to_le_bytes())?;
            for c in cuts {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        for trees in &self.ensembles {
            for t in trees {
                w.write_all(&(t.nodes.len() as u32).to_le_bytes())?;
                for n in &t.nodes {
                    for v in [n.var, n.cut, n.left, n.right] {
                        w.write_all(&v.to_le_bytes())?;
                    }
                    w.write_all(&n.value.to_le_bytes())?;
                }
            }
        }
        for s in &self.sigma {
            w.write_all(&s.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump back; config echo, targets and diagnostics are not stored.
    pub fn load<R: Read>(mut r: R) -> Result<Self, TreeError> {
        let err = |e: std::io::Error| TreeError::Dump(e.to_string());
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(err)?;
        let mut pos = 0usize;
        let mut take = |k: usize| -> Result<&[u8], TreeError> {
            let s = buf.get(pos..pos + k).ok_or_else(|| TreeError::Dump("truncated".into()))?;
            pos += k;
            Ok(s)
        };
        if take(4)? != b"SOTM" {
            return Err(TreeError::Dump("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != 1 {
            return Err(TreeError::Dump(format!("unsupported version {version}")));
        }
        let mut u64s = [0usize; 4];
        for v in u64s.iter_mut() {
            *v = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        }
        let [p, n_ens, n_trees, n_sigma] = u64s;
        let min = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let range = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut cuts = Vec::with_capacity(p);
        for _ in 0..p {
            let k = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let raw = take(k * 8)?;
            cuts.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        }
        let mut ensembles = Vec::with_capacity(n_ens);
        for _ in 0..n_ens {
            let mut trees = Vec::with_capacity(n_trees);
            for _ in 0..n_trees {
                let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                let mut nodes = Vec::with_capacity(count);
                for _ in 0..count {
                    let raw = take(24)?;
                    let u = |k: usize| u32::from_le_bytes(raw[k * 4..k * 4 + 4].try_into().unwrap());
                    nodes.push(CompactNode {
                        var: u(0),
                        cut: u(1),
                        left: u(2),
                        right: u(3),
                        value: f64::from_le_bytes(raw[16..24].try_into().unwrap()),
                    });
                }
                trees.push(CompactTree { nodes });
            }
            ensembles.push(trees);
        }
        let raw = take(n_sigma * 8)?;
        let sigma = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(SumOfTreesModel {
            config: SumOfTreesConfig { trees: n_trees, keep: n_sigma, ..Default::default() },
            scaling: Scaling { min, range },
            p,
            cuts,
            ensembles,
            sigma,
            sigma_burn: Vec::new(),
            target_draws: Vec::new(),
            diagnostics: Diagnostics::default(),
            degenerate: false,
        })
    }
}

/// Fits on a row-major n×p matrix.
pub fn fit(x: &[f64], n: usize, p: usize, y: &[f64], cfg: &SumOfTreesConfig) -> Result<SumOfTreesModel, TreeError> {
    let design = Design::new(x, n, p, cfg.n_cuts)?;
    fit_design(&design, x, y, cfg)
}

/// Fits on a prebuilt design; `x` is needed only for the σ prior's
/// least-squares anchor.
pub fn fit_design(design: &Design, x: &[f64], y: &[f64], cfg: &SumOfTreesConfig) -> Result<SumOfTreesModel, TreeError> {
    let mut s = Sampler::new(design, x, y, cfg)?;
    if s.degenerate {
        return Ok(s.degenerate_model());
    }
    s.run();
    Ok(s.into_model())
}

/// Conjugate normal posterior `(mean, variance)` of a leaf value given `n`
/// residuals summing to `sum`.
pub fn leaf_posterior(n: f64, sum: f64, sigma2: f64, tau2: f64) -> (f64, f64) {
    let prec = 1.0 / tau2 + n / sigma2;
    ((sum / sigma2) / prec, 1.0 / prec)
}

/// Log marginal likelihood of a leaf, dropping terms shared by all trees.
#[inline]
fn log_marginal(n: f64, sum: f64, sigma2: f64, tau2: f64) -> f64 {
    -0.5 * (1.0 + n * tau2 / sigma2).ln() + tau2 * sum * sum / (2.0 * sigma2 * (sigma2 + n * tau2))
}

/// Backfitting MCMC state. Exposed so tests can freeze parts of the chain.
pub struct Sampler<'a> {
    design: &'a Design,
    cfg: SumOfTreesConfig,
    scaling: Scaling,
    degenerate: bool,
    n_cuts: Vec<u32>,
    /// Per group: Σy and Σy² on the scaled response.
    sum_y: Vec<f64>,
    sum_y2: Vec<f64>,
    fit: Vec<f64>,
    resid: Vec<f64>,
    own: Vec<f64>,
    trees: Vec<Tree>,
    leaf_of: Vec<Vec<u32>>,
    target_leaf: Vec<Vec<u32>>,
    target_agg: Vec<Vec<f64>>,
    target_wsum: Vec<f64>,
    dirty: Vec<bool>,
    sigma2: f64,
    tau2: f64,
    nu: f64,
    lambda: f64,
    rng: ChaCha8Rng,
    update_structure: bool,
    update_leaves: bool,
    fixed_sigma2: Option<f64>,
    diag: Diagnostics,
    ensembles: Vec<Vec<CompactTree>>,
    sigma_kept: Vec<f64>,
    sigma_burn: Vec<f64>,
    target_draws: Vec<Vec<f64>>,
    scratch: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, Copy)]
enum Move {
    Grow,
    Prune,
    Change,
}

fn move_probs(stump: bool, growable: bool) -> [f64; 3] {
    match (stump, growable) {
        (true, true) => [1.0, 0.0, 0.0],
        (true, false) => [0.0, 0.0, 0.0],
        (false, true) => [0.25, 0.25, 0.5],
        (false, false) => [0.0, 1.0 / 3.0, 2.0 / 3.0],
    }
}

impl<'a> Sampler<'a> {
    pub fn new(design: &'a Design, x: &[f64], y: &[f64], cfg: &SumOfTreesConfig) -> Result<Self, TreeError> {
        cfg.validate()?;
        if y.len() != design.n {
            return Err(TreeError::Schema(format!("{} responses for {} units", y.len(), design.n)));
        }
        if let Some(index) = y.iter().position(|v| !v.is_finite()) {
            return Err(TreeError::NonFinite { index, value: y[index] });
        }
        if x.len() != design.n * design.p {
            return Err(TreeError::Schema("covariate matrix does not match design".into()));
        }
        let (scaling, degenerate) = Scaling::from_data(y);
        let g = design.groups;
        let mut sum_y = vec![0.0; g];
        let mut sum_y2 = vec![0.0; g];
        let ys: Vec<f64> = y.iter().map(|&v| scaling.scale(v)).collect();
        for (i, &v) in ys.iter().enumerate() {
            let grp = design.group_of[i] as usize;
            sum_y[grp] += v;
            sum_y2[grp] += v * v;
        }
        let tau = 0.5 / (cfg.kappa * (cfg.trees as f64).sqrt());
        let nu = cfg.sigma_df;
        let sigma_hat = ols_sigma(x, design.n, design.p, &ys);
        let chi = ChiSquared::new(nu).expect("positive df");
        let lambda = (sigma_hat * sigma_hat * chi.inverse_cdf(1.0 - cfg.sigma_quantile) / nu).max(SIGMA_FLOOR * SIGMA_FLOOR);
        let t = cfg.trees;
        Ok(Sampler {
            design,
            cfg: cfg.clone(),
            scaling,
            degenerate,
            n_cuts: design.cuts.iter().map(|c| c.len() as u32).collect(),
            sum_y,
            sum_y2,
            fit: vec![0.0; g],
            resid: vec![0.0; g],
            own: vec![0.0; g],
            trees: vec![Tree::stump(); t],
            leaf_of: vec![vec![0; g]; t],
            target_leaf: vec![vec![0; design.targets.rows]; t],
            target_agg: vec![Vec::new(); t],
            target_wsum: design.targets.sets.iter().map(|set| set.iter().map(|e| e.1).sum()).collect(),
            dirty: vec![true; t],
            sigma2: sigma_hat.max(SIGMA_FLOOR).powi(2),
            tau2: tau * tau,
            nu,
            lambda,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            update_structure: true,
            update_leaves: true,
            fixed_sigma2: None,
            diag: Diagnostics { groups: g, ..Default::default() },
            ensembles: Vec::new(),
            sigma_kept: Vec::new(),
            sigma_burn: Vec::new(),
            target_draws: Vec::new(),
            scratch: Vec::new(),
        })
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }
    pub fn tau2(&self) -> f64 {
        self.tau2
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn nu(&self) -> f64 {
        self.nu
    }
    /// Current σ² on the scaled response.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
    pub fn freeze_structure(&mut self) {
        self.update_structure = false;
    }
    pub fn freeze_leaves(&mut self) {
        self.update_leaves = false;
    }
    pub fn fix_sigma2(&mut self, sigma2: f64) {
        self.fixed_sigma2 = Some(sigma2);
        self.sigma2 = sigma2;
    }

    /// Splits the root of a stump tree at `(var, cut)`.
    pub fn split_root(&mut self, t: usize, var: usize, cut: usize) -> Result<(), TreeError> {
        if !self.trees[t].is_stump() || var >= self.design.p || cut >= self.n_cuts[var] as usize {
            return Err(TreeError::Config(format!("cannot split tree {t} at ({var}, {cut})")));
        }
        self.apply_grow(t, 0, var as u32, cut as u32);
        Ok(())
    }

    /// Leaf values of tree `t` in node order.
    pub fn leaf_values(&self, t: usize) -> Vec<f64> {
        self.trees[t].leaves().iter().map(|&l| self.trees[t].nodes[l as usize].value).collect()
    }

    /// Units per leaf and their scaled-response sums, in node order, for a
    /// single-tree sampler.
    pub fn leaf_stats(&self, t: usize) -> Vec<(f64, f64)> {
        let leaves = self.trees[t].leaves();
        leaves
            .iter()
            .map(|&l| {
                let mut n = 0.0;
                let mut s = 0.0;
                for g in 0..self.design.groups {
                    if self.leaf_of[t][g] == l {
                        n += self.design.group_count[g];
                        s += self.sum_y[g];
                    }
                }
                (n, s)
            })
            .collect()
    }

    /// Sum of squared scaled responses.
    pub fn sum_sq(&self) -> f64 {
        self.sum_y2.iter().sum()
    }

    fn apply_grow(&mut self, t: usize, leaf: u32, var: u32, cut: u32) {
        let depth = self.trees[t].nodes[leaf as usize].depth;
        let l = self.trees[t].alloc(Node::leaf(leaf, depth + 1));
        let r = self.trees[t].alloc(Node::leaf(leaf, depth + 1));
        let node = &mut self.trees[t].nodes[leaf as usize];
        node.leaf = false;
        node.var = var;
        node.cut = cut;
        node.left = l;
        node.right = r;
        for g in 0..self.design.groups {
            if self.leaf_of[t][g] == leaf {
                let b = self.design.bins[g * self.design.p + var as usize] as u32;
                self.leaf_of[t][g] = if b <= cut { l } else { r };
            }
        }
        self.dirty[t] = true;
    }

    fn p_split(&self, depth: u32, available: bool) -> f64 {
        if available {
            self.cfg.base * (1.0 + depth as f64).powf(-self.cfg.power)
        } else {
            0.0
        }
    }

    /// Number of columns with at least one cut available at `node`, and the
    /// per-column ranges left in `self.scratch`.
    fn avail(&mut self, t: usize, node: u32) -> usize {
        let mut scratch = std::mem::take(&mut self.scratch);
        self.trees[t].ranges(node, &self.n_cuts, &mut scratch);
        let nv = scratch.iter().filter(|r| r.1 > r.0).count();
        self.scratch = scratch;
        nv
    }

    fn growable_leaves(&mut self, t: usize) -> Vec<u32> {
        let leaves = self.trees[t].leaves();
        leaves.into_iter().filter(|&l| self.avail(t, l) > 0).collect()
    }

    /// Whether a would-be child of `node` (left or right of `(var, cut)`)
    /// has any rule available.
    fn child_available(&mut self, t: usize, node: u32, var: u32, cut: u32, left: bool) -> bool {
        self.avail(t, node);
        let mut r = self.scratch.clone();
        let v = &mut r[var as usize];
        if left {
            v.1 = v.1.min(cut);
        } else {
            v.0 = v.0.max(cut + 1);
        }
        r.iter().any(|x| x.1 > x.0)
    }

    fn ln(x: f64) -> f64 {
        if x > 0.0 {
            x.ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Picks a uniform rule at `node`: (var, cut, n_vars, n_cuts).
    fn draw_rule(&mut self, t: usize, node: u32) -> (u32, u32, usize, usize) {
        let nv = self.avail(t, node);
        let pick = self.rng.random_range(0..nv);
        let (var, (lo, hi)) = self.scratch.iter().copied().enumerate().filter(|(_, r)| r.1 > r.0).nth(pick).unwrap();
        let cut = self.rng.random_range(lo..hi);
        (var as u32, cut, nv, (hi - lo) as usize)
    }

    fn split_stats(&self, t: usize, node_set: &[u32], var: u32, cut: u32) -> (f64, f64, f64, f64) {
        let (mut nl, mut sl, mut nr, mut sr) = (0.0, 0.0, 0.0, 0.0);
        let p = self.design.p;
        for g in 0..self.design.groups {
            if node_set.contains(&self.leaf_of[t][g]) {
                let c = self.design.group_count[g];
                if (self.design.bins[g * p + var as usize] as u32) <= cut {
                    nl += c;
                    sl += self.resid[g];
                } else {
                    nr += c;
                    sr += self.resid[g];
                }
            }
        }
        (nl, sl, nr, sr)
    }

    fn propose(&mut self, t: usize) {
        let growable = self.growable_leaves(t);
        let stump = self.trees[t].is_stump();
        let probs = move_probs(stump, !growable.is_empty());
        let u: f64 = self.rng.random();
        let mv = if u < probs[0] {
            Move::Grow
        } else if u < probs[0] + probs[1] {
            Move::Prune
        } else if probs[2] > 0.0 {
            Move::Change
        } else {
            return;
        };
        let (s2, tau2) = (self.sigma2, self.tau2);
        let lm = |n: f64, s: f64| log_marginal(n, s, s2, tau2);
        match mv {
            Move::Grow => {
                self.diag.grow_proposed += 1;
                let leaf = growable[self.rng.random_range(0..growable.len())];
                let (var, cut, nv, nc) = self.draw_rule(t, leaf);
                let (nl, sl, nr, sr) = self.split_stats(t, &[leaf], var, cut);
                if nl == 0.0 || nr == 0.0 {
                    return;
                }
                let d = self.trees[t].nodes[leaf as usize].depth;
                let avail_l = self.child_available(t, leaf, var, cut, true);
                let avail_r = self.child_available(t, leaf, var, cut, false);
                let ps = self.p_split(d, true);
                let log_lik = lm(nl, sl) + lm(nr, sr) - lm(nl + nr, sl + sr);
                let log_prior = Self::ln(ps) - (nv as f64).ln() - (nc as f64).ln()
                    + Self::ln(1.0 - self.p_split(d + 1, avail_l))
                    + Self::ln(1.0 - self.p_split(d + 1, avail_r))
                    - Self::ln(1.0 - ps);
                let parent = self.trees[t].nodes[leaf as usize].parent;
                let parent_was_nog = parent != NONE && self.trees[t].is_nog(parent);
                let nogs_after = self.trees[t].nogs().len() + 1 - parent_was_nog as usize;
                let growable_after = growable.len() - 1 + avail_l as usize + avail_r as usize;
                let p_prune_after = move_probs(false, growable_after > 0)[1];
                let log_q = Self::ln(p_prune_after) - (nogs_after as f64).ln()
                    - (Self::ln(probs[0]) - (growable.len() as f64).ln() - (nv as f64).ln() - (nc as f64).ln());
                if self.rng.random::<f64>().ln() < log_lik + log_prior + log_q {
                    self.diag.grow_accepted += 1;
                    self.apply_grow(t, leaf, var, cut);
                }
            }
            Move::Prune => {
                self.diag.prune_proposed += 1;
                let nogs = self.trees[t].nogs();
                let node = nogs[self.rng.random_range(0..nogs.len())];
                let n = self.trees[t].nodes[node as usize];
                let (nl, sl, nr, sr) = self.split_stats(t, &[n.left, n.right], n.var, n.cut);
                let d = n.depth;
                let nv = self.avail(t, node);
                let (lo, hi) = self.scratch[n.var as usize];
                let nc = (hi - lo) as usize;
                let avail_l = self.child_available(t, node, n.var, n.cut, true);
                let avail_r = self.child_available(t, node, n.var, n.cut, false);
                let ps = self.p_split(d, true);
                let log_lik = lm(nl + nr, sl + sr) - lm(nl, sl) - lm(nr, sr);
                let log_prior = -(Self::ln(ps) - (nv as f64).ln() - (nc as f64).ln()
                    + Self::ln(1.0 - self.p_split(d + 1, avail_l))
                    + Self::ln(1.0 - self.p_split(d + 1, avail_r)))
                    + Self::ln(1.0 - ps);
                let growable_after = growable.len() + 1 - avail_l as usize - avail_r as usize;
                let p_grow_after = move_probs(n.parent == NONE, true)[0];
                let log_q = Self::ln(p_grow_after) - (growable_after as f64).ln() - (nv as f64).ln() - (nc as f64).ln()
                    - (Self::ln(probs[1]) - (nogs.len() as f64).ln());
                if self.rng.random::<f64>().ln() < log_lik + log_prior + log_q {
                    self.diag.prune_accepted += 1;
                    let tree = &mut self.trees[t];
                    for c in [n.left, n.right] {
                        tree.nodes[c as usize].alive = false;
                        tree.free.push(c);
                    }
                    let node_ref = &mut tree.nodes[node as usize];
                    node_ref.leaf = true;
                    node_ref.left = NONE;
                    node_ref.right = NONE;
                    for g in 0..self.design.groups {
                        let l = self.leaf_of[t][g];
                        if l == n.left || l == n.right {
                            self.leaf_of[t][g] = node;
                        }
                    }
                    self.dirty[t] = true;
                }
            }
            Move::Change => {
                self.diag.change_proposed += 1;
                let nogs = self.trees[t].nogs();
                let node = nogs[self.rng.random_range(0..nogs.len())];
                let n = self.trees[t].nodes[node as usize];
                let (var, cut, _, _) = self.draw_rule(t, node);
                let (nl, sl, nr, sr) = self.split_stats(t, &[n.left, n.right], var, cut);
                if nl == 0.0 || nr == 0.0 {
                    return;
                }
                let (ol, osl, or, osr) = self.split_stats(t, &[n.left, n.right], n.var, n.cut);
                let d = n.depth;
                let old_l = self.child_available(t, node, n.var, n.cut, true);
                let old_r = self.child_available(t, node, n.var, n.cut, false);
                let new_l = self.child_available(t, node, var, cut, true);
                let new_r = self.child_available(t, node, var, cut, false);
                let log_lik = lm(nl, sl) + lm(nr, sr) - lm(ol, osl) - lm(or, osr);
                let log_prior = Self::ln(1.0 - self.p_split(d + 1, new_l)) + Self::ln(1.0 - self.p_split(d + 1, new_r))
                    - Self::ln(1.0 - self.p_split(d + 1, old_l))
                    - Self::ln(1.0 - self.p_split(d + 1, old_r));
                let growable_after = growable.len() + new_l as usize + new_r as usize - old_l as usize - old_r as usize;
                let log_q = Self::ln(move_probs(false, growable_after > 0)[2]) - Self::ln(probs[2]);
                if self.rng.random::<f64>().ln() < log_lik + log_prior + log_q {
                    self.diag.change_accepted += 1;
                    let node_ref = &mut self.trees[t].nodes[node as usize];
                    node_ref.var = var;
                    node_ref.cut = cut;
                    let p = self.design.p;
                    for g in 0..self.design.groups {
                        let l = self.leaf_of[t][g];
                        if l == n.left || l == n.right {
                            let b = self.design.bins[g * p + var as usize] as u32;
                            self.leaf_of[t][g] = if b <= cut { n.left } else { n.right };
                        }
                    }
                    self.dirty[t] = true;
                }
            }
        }
    }

    fn draw_leaves(&mut self, t: usize) {
        let size = self.trees[t].nodes.len();
        let mut n = vec![0.0; size];
        let mut s = vec![0.0; size];
        for g in 0..self.design.groups {
            let l = self.leaf_of[t][g] as usize;
            n[l] += self.design.group_count[g];
            s[l] += self.resid[g];
        }
        for l in self.trees[t].leaves() {
            let (mean, var) = leaf_posterior(n[l as usize], s[l as usize], self.sigma2, self.tau2);
            let z: f64 = StandardNormal.sample(&mut self.rng);
            self.trees[t].nodes[l as usize].value = mean + var.sqrt() * z;
        }
    }

    /// One backfitting sweep over all trees followed by the σ² update.
    pub fn step(&mut self) {
        for t in 0..self.trees.len() {
            for g in 0..self.design.groups {
                let own = self.trees[t].nodes[self.leaf_of[t][g] as usize].value;
                self.own[g] = own;
                self.resid[g] = self.sum_y[g] - self.design.group_count[g] * (self.fit[g] - own);
            }
            if self.update_structure {
                self.propose(t);
            }
            if self.update_leaves {
                self.draw_leaves(t);
            }
            for g in 0..self.design.groups {
                let now = self.trees[t].nodes[self.leaf_of[t][g] as usize].value;
                self.fit[g] += now - self.own[g];
            }
        }
        // Recompute totals so rounding never accumulates.
        for g in 0..self.design.groups {
            self.fit[g] = (0..self.trees.len()).map(|t| self.trees[t].nodes[self.leaf_of[t][g] as usize].value).sum();
        }
        self.draw_sigma();
    }

    fn draw_sigma(&mut self) {
        if let Some(s2) = self.fixed_sigma2 {
            self.sigma2 = s2;
            return;
        }
        let mut ssr = 0.0;
        for g in 0..self.design.groups {
            let f = self.fit[g];
            ssr += self.sum_y2[g] - 2.0 * f * self.sum_y[g] + self.design.group_count[g] * f * f;
        }
        self.sigma2 = draw_sigma2(self.nu, self.lambda, ssr.max(0.0), self.design.n as f64, &mut self.rng);
    }

    /// Re-routes target rows through tree `t` and aggregates set weights per node.
    fn refresh_targets(&mut self, t: usize) {
        let tg = &self.design.targets;
        let p = self.design.p;
        for r in 0..tg.rows {
            self.target_leaf[t][r] = self.trees[t].find_leaf(&tg.bins[r * p..(r + 1) * p]);
        }
        let sets = tg.sets.len();
        let agg = &mut self.target_agg[t];
        agg.clear();
        agg.resize(self.trees[t].nodes.len() * sets, 0.0);
        for (s, set) in tg.sets.iter().enumerate() {
            for &(r, w) in set {
                agg[self.target_leaf[t][r as usize] as usize * sets + s] += w;
            }
        }
        self.dirty[t] = false;
    }

    fn record(&mut self) {
        let sets = self.design.targets.sets.len();
        if sets > 0 {
            let mut out = vec![0.0; sets];
            for t in 0..self.trees.len() {
                if self.dirty[t] {
                    self.refresh_targets(t);
                }
                let agg = &self.target_agg[t];
                for l in self.trees[t].leaves() {
                    let v = self.trees[t].nodes[l as usize].value;
                    for (s, o) in out.iter_mut().enumerate() {
                        *o += agg[l as usize * sets + s] * v;
                    }
                }
            }
            let sc = self.scaling;
            let draws = out
                .iter()
                .zip(&self.target_wsum)
                .map(|(v, wsum)| sc.range * v + (0.5 * sc.range + sc.min) * wsum)
                .collect();
            self.target_draws.push(draws);
        }
        if self.cfg.keep_trees {
            self.ensembles.push(self.trees.iter().map(Tree::compact).collect());
        }
        let k = self.trees.len() as f64;
        self.diag.mean_depth += self.trees.iter().map(|t| t.max_depth() as f64).sum::<f64>() / k;
        self.diag.mean_leaves += self.trees.iter().map(|t| t.leaves().len() as f64).sum::<f64>() / k;
        self.sigma_kept.push(self.sigma2.sqrt() * self.scaling.range);
    }

    pub fn run(&mut self) {
        for _ in 0..self.cfg.burn_in {
            self.step();
            self.sigma_burn.push(self.sigma2.sqrt() * self.scaling.range);
        }
        for _ in 0..self.cfg.keep {
            self.step();
            self.record();
        }
        self.diag.mean_depth /= self.cfg.keep as f64;
        self.diag.mean_leaves /= self.cfg.keep as f64;
    }

    pub fn into_model(self) -> SumOfTreesModel {
        SumOfTreesModel {
            config: self.cfg,
            scaling: self.scaling,
            p: self.design.p,
            cuts: self.design.cuts.clone(),
            ensembles: self.ensembles,
            sigma: self.sigma_kept,
            sigma_burn: self.sigma_burn,
            target_draws: self.target_draws,
            diagnostics: self.diag,
            degenerate: self.degenerate,
        }
    }

    fn degenerate_model(self) -> SumOfTreesModel {
        let k = self.cfg.keep;
        let sc = self.scaling;
        let stumps = vec![Tree::stump().compact(); self.cfg.trees];
        let target = self
            .design
            .targets
            .sets
            .iter()
            .map(|set| {
                let wsum: f64 = set.iter().map(|e| e.1).sum();
                (0.5 * sc.range + sc.min) * wsum
            })
            .collect::<Vec<_>>();
        SumOfTreesModel {
            ensembles: if self.cfg.keep_trees { vec![stumps; k] } else { Vec::new() },
            sigma: vec![SIGMA_FLOOR * sc.range; k],
            sigma_burn: Vec::new(),
            target_draws: if target.is_empty() { Vec::new() } else { vec![target; k] },
            diagnostics: Diagnostics { groups: self.design.groups, ..Default::default() },
            config: self.cfg,
            scaling: sc,
            p: self.design.p,
            cuts: self.design.cuts.clone(),
            degenerate: true,
        }
    }
}

/// σ² ~ (νλ + SSR) / χ²_{ν+n}, floored.
pub fn draw_sigma2(nu: f64, lambda: f64, ssr: f64, n: f64, rng: &mut ChaCha8Rng) -> f64 {
    let chi: f64 = Gamma::new(0.5 * (nu + n), 2.0).expect("positive shape").sample(rng);
    ((nu * lambda + ssr) / chi).max(SIGMA_FLOOR * SIGMA_FLOOR)
}

/// Residual SD of a least-squares fit of `y` on `[1, x]`; falls back to the
/// sample SD when the design is rank-deficient or too small.
fn ols_sigma(x: &[f64], n: usize, p: usize, y: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / n as f64;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    if n <= p + 1 {
        return sd;
    }
    let mut cols = vec![vec![1.0; n]];
    for c in 0..p {
        cols.push((0..n).map(|i| x[i * p + c]).collect());
    }
    let names: Vec<String> = (0..=p).map(|i| i.to_string()).collect();
    match linalg::ols(&cols, &names, y) {
        Ok(fit) if fit.rss > 0.0 => (fit.rss / (n - p - 1) as f64).sqrt(),
        _ => sd,
    }
}
