//! Declarative analysis configuration: one file per prior specification.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mtsens::confounding::{build_strategy, ConfoundingSpec, Direction, PriorSpec, Strategy};
use mtsens::dataset::{DatasetSchema, ObservationalDataset};
use mtsens::engine::{EngineConfig, Estimand};
use mtsens::gps::{GpsModel, MultilogitConfig};
use mtsens::simlab::Axis;
use mtsens::sumtrees::SumOfTreesConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Fast,
    Paper,
}

impl Profile {
    pub fn trees(self) -> SumOfTreesConfig {
        match self {
            Profile::Fast => SumOfTreesConfig::fast(),
            Profile::Paper => SumOfTreesConfig::default(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Fast => "fast",
            Profile::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<Profile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataSection,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub gps: GpsSection,
    #[serde(default)]
    pub trees: TreesSection,
    /// `c.<j>.<l>` keyed by original treatment labels.
    #[serde(default)]
    pub c: BTreeMap<String, BTreeMap<String, PriorConfig>>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contour: Option<ContourSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nominal: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ordinal: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arms: Option<Vec<i64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EstimandKind {
    #[default]
    Cate,
    Catt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default = "ten")]
    pub m1: usize,
    #[serde(default = "ten")]
    pub m2: usize,
    #[serde(default)]
    pub estimand: EstimandKind,
    /// Reference treatment label for CATT.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gps_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity_seed: Option<u64>,
}

fn ten() -> usize {
    10
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection { m1: 10, m2: 10, estimand: EstimandKind::Cate, reference: None, gps_seed: None, sensitivity_seed: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GpsKind {
    Stratified,
    #[default]
    Multilogit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GpsSection {
    #[serde(default)]
    pub model: GpsKind,
    /// Stratifying covariates by name.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TreesSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trees: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_df: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_quantile: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_cuts: Option<usize>,
}

impl TreesSection {
    pub fn apply(&self, mut t: SumOfTreesConfig) -> SumOfTreesConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { t.$f = v; } )* };
        }
        set!(trees, burn_in, keep, kappa, sigma_df, sigma_quantile, base, power, n_cuts);
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionConfig {
    Below,
    Above,
}

/// A prior as written in the config. `band` and `goalpost` are scaled by the
/// residual SD of the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase", deny_unknown_fields)]
pub enum PriorConfig {
    Point { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Truncnormal { center: f64, spread: f64, lo: f64, hi: f64 },
    Band { center: f64, h: f64 },
    Goalpost { center: f64, h: f64, direction: DirectionConfig },
    Stratified { column: String, strata: BTreeMap<String, PriorConfig> },
}

impl PriorConfig {
    fn needs_sigma(&self) -> bool {
        match self {
            PriorConfig::Band { .. } | PriorConfig::Goalpost { .. } => true,
            PriorConfig::Stratified { strata, .. } => strata.values().any(PriorConfig::needs_sigma),
            _ => false,
        }
    }

    fn resolve(&self, ds: &ObservationalDataset, sigma: f64, at: &str) -> Result<PriorSpec, CliError> {
        let check_h = |h: f64| {
            if h > 0.0 && h.is_finite() {
                Ok(())
            } else {
                Err(CliError::Usage(format!("{at}: h must be positive, got {h}")))
            }
        };
        let check_center = |c: f64| {
            if (-1.0..=1.0).contains(&c) {
                Ok(())
            } else {
                Err(CliError::Usage(format!("{at}: center {c} outside the natural bounds [-1, 1]")))
            }
        };
        let spec = match self {
            PriorConfig::Point { value } => PriorSpec::point(*value),
            PriorConfig::Uniform { lo, hi } => PriorSpec::uniform(*lo, *hi),
            PriorConfig::Truncnormal { center, spread, lo, hi } => {
                PriorSpec::TruncNormal { center: *center, spread: *spread, lo: *lo, hi: *hi }
            }
            PriorConfig::Band { center, h } => {
                check_h(*h)?;
                check_center(*center)?;
                build_strategy(Strategy::II, *center, *h, sigma)
            }
            PriorConfig::Goalpost { center, h, direction } => {
                check_h(*h)?;
                check_center(*center)?;
                let d = match direction {
                    DirectionConfig::Below => Direction::Below,
                    DirectionConfig::Above => Direction::Above,
                };
                build_strategy(Strategy::III(d), *center, *h, sigma)
            }
            PriorConfig::Stratified { column, strata } => {
                let idx = ds
                    .column_index(column)
                    .ok_or_else(|| CliError::Usage(format!("{at}: stratifying column '{column}' is not a covariate")))?;
                let mut out = BTreeMap::new();
                for (k, p) in strata {
                    let key: i64 = k
                        .trim()
                        .parse()
                        .map_err(|_| CliError::Usage(format!("{at}: stratum key '{k}' is not an integer")))?;
                    out.insert(key, p.resolve(ds, sigma, &format!("{at}.strata.{k}"))?);
                }
                PriorSpec::Stratified { column: idx, strata: out }
            }
        };
        spec.validate().map_err(|m| CliError::Usage(format!("{at}: {m}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_json")]
    pub json: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_csv: Option<PathBuf>,
    #[serde(default = "yes")]
    pub table: bool,
}

fn default_json() -> PathBuf {
    PathBuf::from("analysis.json")
}

fn yes() -> bool {
    true
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { json: default_json(), samples_csv: None, table: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContourSection {
    /// Treatment labels (j, k).
    pub pair: [i64; 2],
    pub c_jk: Axis,
    pub c_kj: Axis,
    #[serde(default = "default_contour_csv")]
    pub csv: PathBuf,
    /// Adds lower95 and upper95 columns.
    #[serde(default)]
    pub intervals: bool,
}

fn default_contour_csv() -> PathBuf {
    PathBuf::from("contour.csv")
}

impl AnalysisConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: AnalysisConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message())))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = Self::parse(&text).map_err(|e| e.context(&path.display().to_string()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks that need no data.
    fn check(&self) -> Result<(), CliError> {
        for (j, row) in &self.c {
            for l in row.keys() {
                let (a, b) = (label(j)?, label(l)?);
                if a == b {
                    return Err(CliError::Usage(format!("c.{j}.{l}: a confounding function needs two distinct arms")));
                }
            }
        }
        if self.engine.m1 == 0 || self.engine.m2 == 0 {
            return Err(CliError::Usage("engine.m1 and engine.m2 must be at least 1".into()));
        }
        if self.engine.estimand == EstimandKind::Catt && self.engine.reference.is_none() {
            return Err(CliError::Usage("engine.reference is required when estimand = \"catt\"".into()));
        }
        // Bounds that do not depend on the data are checked here so that a bad
        // prior fails before any data is read.
        for (j, row) in &self.c {
            for (l, p) in row {
                static_check(p, &format!("c.{j}.{l}"))?;
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            outcome: self.data.outcome.clone(),
            treatment: self.data.treatment.clone(),
            covariates: self.data.covariates.clone(),
            nominal: self.data.nominal.clone(),
            ordinal: self.data.ordinal.clone(),
            arms: self.data.arms.clone(),
        }
    }

    pub fn needs_sigma(&self) -> bool {
        self.c.values().flat_map(|r| r.values()).any(PriorConfig::needs_sigma)
    }

    /// Resolves labels and names against the loaded data.
    pub fn confounding_spec(&self, ds: &ObservationalDataset, sigma: f64) -> Result<ConfoundingSpec, CliError> {
        let mut spec = ConfoundingSpec::new(ds.n_arms());
        for (j, row) in &self.c {
            for (l, p) in row {
                let at = format!("c.{j}.{l}");
                let (a, b) = (arm(ds, label(j)?, &at)?, arm(ds, label(l)?, &at)?);
                spec.set(a, b, p.resolve(ds, sigma, &at)?).map_err(|e| CliError::Usage(format!("{at}: {e}")))?;
            }
        }
        Ok(spec)
    }

    pub fn gps_model(&self, ds: &ObservationalDataset) -> Result<GpsModel, CliError> {
        Ok(match self.gps.model {
            GpsKind::Stratified => {
                let columns = self
                    .gps
                    .columns
                    .iter()
                    .map(|c| ds.column_index(c).ok_or_else(|| CliError::Usage(format!("gps.columns: '{c}' is not a covariate"))))
                    .collect::<Result<_, _>>()?;
                GpsModel::Stratified { columns, prior_weight: self.gps.prior_weight.unwrap_or(1.0) }
            }
            GpsKind::Multilogit => {
                let d = MultilogitConfig::default();
                GpsModel::Multilogit(MultilogitConfig {
                    ridge: self.gps.ridge.unwrap_or(d.ridge),
                    max_iter: self.gps.max_iter.unwrap_or(d.max_iter),
                    tol: self.gps.tol.unwrap_or(d.tol),
                })
            }
        })
    }

    pub fn engine_config(&self, ds: &ObservationalDataset, profile: Profile, seed: u64, jobs: usize) -> Result<EngineConfig, CliError> {
        let estimand = match self.engine.estimand {
            EstimandKind::Cate => Estimand::Cate,
            EstimandKind::Catt => {
                let r = self.engine.reference.expect("checked at parse time");
                Estimand::Catt { reference: arm(ds, r, "engine.reference")? }
            }
        };
        Ok(EngineConfig {
            estimand,
            jobs,
            gps_seed: self.engine.gps_seed,
            sensitivity_seed: self.engine.sensitivity_seed,
            ..EngineConfig::new(self.engine.m1, self.engine.m2, self.gps_model(ds)?, self.trees.apply(profile.trees()), seed)
        })
    }
}

fn static_check(p: &PriorConfig, at: &str) -> Result<(), CliError> {
    let spec = match p {
        PriorConfig::Point { value } => PriorSpec::point(*value),
        PriorConfig::Uniform { lo, hi } => PriorSpec::uniform(*lo, *hi),
        PriorConfig::Truncnormal { center, spread, lo, hi } => {
            PriorSpec::TruncNormal { center: *center, spread: *spread, lo: *lo, hi: *hi }
        }
        PriorConfig::Band { center, .. } | PriorConfig::Goalpost { center, .. } => PriorSpec::point(*center),
        PriorConfig::Stratified { strata, .. } => {
            for (k, s) in strata {
                if let PriorConfig::Stratified { .. } = s {
                    return Err(CliError::Usage(format!("{at}.strata.{k}: stratified priors cannot be nested")));
                }
                static_check(s, &format!("{at}.strata.{k}"))?;
            }
            return Ok(());
        }
    };
    spec.validate().map_err(|m| CliError::Usage(format!("{at}: {m}")))
}

fn label(s: &str) -> Result<i64, CliError> {
    s.trim().parse().map_err(|_| CliError::Usage(format!("treatment label '{s}' in c.* is not an integer")))
}

pub fn arm(ds: &ObservationalDataset, label: i64, at: &str) -> Result<usize, CliError> {
    ds.arm_of_label(label).ok_or_else(|| {
        CliError::Usage(format!("{at}: treatment label {label} does not occur in the data (labels {:?})", ds.arm_labels()))
    })
}
