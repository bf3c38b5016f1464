//! Output documents and the tables printed from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use mtsens::confounding::PriorSpec;
use mtsens::engine::FitRecord;
use mtsens::gps::GpsProvenance;
use mtsens::simlab::{MetricRow, SimulationConfig};
use mtsens::sumtrees::SumOfTreesConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Two decimals, without a negative zero.
pub fn r2(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub j: i64,
    pub k: i64,
    pub mean: f64,
    pub lower95: f64,
    pub upper95: f64,
    #[serde(rename = "M1")]
    pub m1: usize,
    #[serde(rename = "M2")]
    pub m2: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEntry {
    pub j: i64,
    pub l: i64,
    pub prior: PriorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n: usize,
    pub covariates: usize,
    pub arms: Vec<i64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub eps: f64,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub kind: String,
    pub name: String,
    pub estimand: String,
    pub profile: String,
    pub seed: u64,
    pub gps_seed: u64,
    pub sensitivity_seed: u64,
    #[serde(rename = "M1")]
    pub m1: usize,
    #[serde(rename = "M2")]
    pub m2: usize,
    pub keep: usize,
    pub data: DataSummary,
    pub gps: GpsProvenance,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sigma_hat: Option<f64>,
    pub trees: SumOfTreesConfig,
    pub priors: Vec<PriorEntry>,
    pub overlap: OverlapSummary,
    pub pairs: Vec<PairEstimate>,
    #[serde(default, skip_deserializing)]
    pub fits: Vec<FitRecordOut>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FitRecordOut {
    pub m1: usize,
    pub m2: usize,
    pub seed: u64,
    pub degenerate: bool,
    pub sigma_mean: f64,
    pub grow_acceptance: f64,
    pub mean_leaves: f64,
}

impl From<&FitRecord> for FitRecordOut {
    fn from(f: &FitRecord) -> Self {
        FitRecordOut {
            m1: f.m1,
            m2: f.m2,
            seed: f.seed,
            degenerate: f.degenerate,
            sigma_mean: f.sigma_mean,
            grow_acceptance: f.grow_acceptance,
            mean_leaves: f.mean_leaves,
        }
    }
}

impl AnalysisReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.name);
        let _ = writeln!(s, "{}  M1={} M2={}  seed {}", self.estimand.to_uppercase(), self.m1, self.m2, self.seed);
        let _ = writeln!(s, "{:<12}{:>9}   95% interval", "contrast", "estimate");
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{:<12}{:>9}   ({}, {})",
                format!("{} vs {}", p.j, p.k),
                r2(p.mean),
                r2(p.lower95),
                r2(p.upper95)
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricOut {
    pub strategy: String,
    pub j: usize,
    pub k: usize,
    pub truth: f64,
    pub aab: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_width: f64,
    pub reps: usize,
}

impl From<&MetricRow> for MetricOut {
    fn from(r: &MetricRow) -> Self {
        MetricOut {
            strategy: r.strategy.clone(),
            j: r.pair.j,
            k: r.pair.k,
            truth: r.truth,
            aab: r.metrics.aab,
            rmse: r.metrics.rmse,
            coverage: r.metrics.coverage,
            mean_width: r.metrics.mean_width,
            reps: r.metrics.reps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub kind: String,
    pub scenario: String,
    pub profile: String,
    pub config: serde_json::Value,
    pub metrics: Vec<MetricOut>,
}

impl SimulationReport {
    pub fn new(scenario: &str, profile: &str, cfg: &SimulationConfig, rows: &[MetricRow]) -> Self {
        SimulationReport {
            kind: "simulation".into(),
            scenario: scenario.into(),
            profile: profile.into(),
            config: serde_json::to_value(cfg).expect("config serializes"),
            metrics: rows.iter().map(MetricOut::from).collect(),
        }
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = Vec::new();
        for m in &self.metrics {
            if !v.contains(&(m.j, m.k)) {
                v.push((m.j, m.k));
            }
        }
        v
    }

    fn strategies(&self) -> Vec<&str> {
        let mut v: Vec<&str> = Vec::new();
        for m in &self.metrics {
            if !v.contains(&m.strategy.as_str()) {
                v.push(&m.strategy);
            }
        }
        v
    }

    fn cell(&self, strategy: &str, pair: (usize, usize)) -> Option<&MetricOut> {
        self.metrics.iter().find(|m| m.strategy == strategy && (m.j, m.k) == pair)
    }

    /// One row per strategy; AAB, RMSE and coverage per pair.
    pub fn write_wide_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let pairs = self.pairs();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["strategy".to_string()];
        for (j, k) in &pairs {
            for m in ["aab", "rmse", "coverage"] {
                header.push(format!("{m}_{j}{k}"));
            }
        }
        out.write_record(&header)?;
        for s in self.strategies() {
            let mut row = vec![s.to_string()];
            for &p in &pairs {
                match self.cell(s, p) {
                    Some(m) => row.extend([m.aab.to_string(), m.rmse.to_string(), m.coverage.to_string()]),
                    None => row.extend(["".into(), "".into(), "".into()]),
                }
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let pairs = self.pairs();
        let mut s = String::new();
        let _ = writeln!(s, "{}  ({} replications)", self.scenario, self.metrics.first().map_or(0, |m| m.reps));
        let _ = write!(s, "{:<16}", "strategy");
        for (j, k) in &pairs {
            let _ = write!(s, "{:>24}", format!("{j} vs {k} aab/rmse/cov"));
        }
        s.push('\n');
        let _ = write!(s, "{:<16}", "truth");
        for &p in &pairs {
            let t = self.metrics.iter().find(|m| (m.j, m.k) == p).map_or(f64::NAN, |m| m.truth);
            let _ = write!(s, "{:>24}", r2(t));
        }
        s.push('\n');
        for st in self.strategies() {
            let _ = write!(s, "{st:<16}");
            for &p in &pairs {
                let cell = match self.cell(st, p) {
                    Some(m) => format!("{} {} {}", r2(m.aab), r2(m.rmse), r2(m.coverage)),
                    None => "-".into(),
                };
                let _ = write!(s, "{cell:>24}");
            }
            s.push('\n');
        }
        s
    }
}

/// Combines analysis outputs into one specification table (one row per file)
/// and prints simulation outputs as metric tables.
pub fn combine(paths: &[std::path::PathBuf]) -> Result<(String, Option<String>), CliError> {
    let mut analyses = Vec::new();
    let mut text = String::new();
    for p in paths {
        let raw = std::fs::read_to_string(p).map_err(|e| CliError::io(&p.display().to_string(), e))?;
        let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("{}: not an analysis or simulation output: {e}", p.display()));
        let doc: serde_json::Value = serde_json::from_str(&raw).map_err(|e| bad(&e))?;
        match doc.get("kind").and_then(|k| k.as_str()) {
            Some("analysis") => analyses.push(serde_json::from_value::<AnalysisReport>(doc).map_err(|e| bad(&e))?),
            Some("simulation") => {
                let s: SimulationReport = serde_json::from_value(doc).map_err(|e| bad(&e))?;
                text.push_str(&s.table());
                text.push('\n');
            }
            _ => return Err(bad(&"missing or unknown `kind`")),
        }
    }
    if analyses.is_empty() {
        return Ok((text, None));
    }
    let mut pairs: Vec<(i64, i64)> = Vec::new();
    for a in &analyses {
        for p in &a.pairs {
            if !pairs.contains(&(p.j, p.k)) {
                pairs.push((p.j, p.k));
            }
        }
    }
    let width = analyses.iter().map(|a| a.name.len()).max().unwrap_or(0).max(13) + 2;
    let _ = write!(text, "{:<width$}", "specification");
    for (j, k) in &pairs {
        let _ = write!(text, "{:>24}", format!("{j} vs {k}"));
    }
    text.push('\n');
    let mut csv_out = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["specification".to_string()];
    for (j, k) in &pairs {
        header.extend([format!("mean_{j}{k}"), format!("lower95_{j}{k}"), format!("upper95_{j}{k}")]);
    }
    csv_out.write_record(&header).map_err(|e| CliError::io("report csv", e))?;
    for a in &analyses {
        let by: BTreeMap<(i64, i64), &PairEstimate> = a.pairs.iter().map(|p| ((p.j, p.k), p)).collect();
        let _ = write!(text, "{:<width$}", a.name);
        let mut row = vec![a.name.clone()];
        for key in &pairs {
            match by.get(key) {
                Some(p) => {
                    let _ = write!(text, "{:>24}", format!("{} ({}, {})", r2(p.mean), r2(p.lower95), r2(p.upper95)));
                    row.extend([p.mean.to_string(), p.lower95.to_string(), p.upper95.to_string()]);
                }
                None => {
                    let _ = write!(text, "{:>24}", "-");
                    row.extend(["".into(), "".into(), "".into()]);
                }
            }
        }
        text.push('\n');
        csv_out.write_record(&row).map_err(|e| CliError::io("report csv", e))?;
    }
    let bytes = csv_out.into_inner().map_err(|e| CliError::io("report csv", e))?;
    Ok((text, Some(String::from_utf8(bytes).expect("csv is utf-8"))))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(&path.display().to_string(), e))
}
