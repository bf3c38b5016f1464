//! Observational multi-treatment data: schema, CSV ingestion, validation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gps::GpsDraws;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed CSV at row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("column '{0}' is listed more than once")]
    DuplicateColumn(String),
    #[error("schema names no covariate columns")]
    NoCovariates,
    #[error("missing value in row {row}, column '{column}'")]
    MissingCell { row: usize, column: String },
    #[error("non-binary outcome '{value}' in row {row}, column '{column}'")]
    NonBinaryOutcome { row: usize, column: String, value: String },
    #[error("treatment label '{value}' in row {row}, column '{column}' is not an integer")]
    BadTreatment { row: usize, column: String, value: String },
    #[error("treatment label {label} in row {row} is not among the declared arms")]
    UndeclaredArm { row: usize, label: i64 },
    #[error("value '{value}' in row {row}, column '{column}' is not a number")]
    BadNumber { row: usize, column: String, value: String },
    #[error("value '{value}' in row {row}, ordinal column '{column}' is not an integer")]
    BadOrdinal { row: usize, column: String, value: String },
    #[error("empty treatment arm {0}")]
    EmptyArm(i64),
    #[error("need at least 2 treatment arms, found {0}")]
    TooFewArms(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0}")]
    Invalid(String),
}

/// How a covariate column is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Continuous,
    Ordinal,
    Binary,
}

impl ColumnKind {
    pub fn is_discrete(self) -> bool {
        !matches!(self, ColumnKind::Continuous)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
}

/// A nominal source column expanded into `levels.len() - 1` indicators.
/// `levels[0]` is the reference level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalEncoding {
    pub column: String,
    pub levels: Vec<String>,
    /// Index of the first indicator column in the covariate matrix.
    pub first: usize,
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub nominal: Vec<String>,
    #[serde(default)]
    pub ordinal: Vec<String>,
    /// Declared treatment labels; any that never occurs is an empty arm.
    #[serde(default)]
    pub arms: Option<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationalDataset {
    n: usize,
    p: usize,
    covariates: Vec<f64>,
    columns: Vec<ColumnMeta>,
    nominal: Vec<NominalEncoding>,
    treatment: Vec<usize>,
    outcome: Vec<u8>,
    arm_labels: Vec<i64>,
    outcome_name: String,
    treatment_name: String,
}

/// An ordered pair of distinct arms (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TreatmentPair {
    pub j: usize,
    pub k: usize,
}

impl TreatmentPair {
    pub fn new(j: usize, k: usize, n_arms: usize) -> Result<Self, DataError> {
        if j == k {
            return Err(DataError::Invalid(format!("pair ({j},{k}) repeats an arm")));
        }
        if j == 0 || k == 0 || j > n_arms || k > n_arms {
            return Err(DataError::Invalid(format!("pair ({j},{k}) outside arms 1..{n_arms}")));
        }
        Ok(TreatmentPair { j, k })
    }

    pub fn swapped(self) -> Self {
        TreatmentPair { j: self.k, k: self.j }
    }

    /// All pairs j < k in lexicographic order.
    pub fn all(n_arms: usize) -> Vec<TreatmentPair> {
        let mut out = Vec::new();
        for j in 1..=n_arms {
            for k in (j + 1)..=n_arms {
                out.push(TreatmentPair { j, k });
            }
        }
        out
    }
}

impl ObservationalDataset {
    /// Builds a dataset from already-coded parts. `treatment` is 1-based.
    pub fn new(
        columns: Vec<ColumnMeta>,
        covariates: Vec<f64>,
        treatment: Vec<usize>,
        outcome: Vec<u8>,
        arm_labels: Vec<i64>,
    ) -> Result<Self, DataError> {
        let n = treatment.len();
        let p = columns.len();
        if outcome.len() != n {
            return Err(DataError::Dimension(format!("{} outcomes for {n} units", outcome.len())));
        }
        if covariates.len() != n * p {
            return Err(DataError::Dimension(format!(
                "covariate matrix has {} cells, expected {n}x{p}",
                covariates.len()
            )));
        }
        if p == 0 {
            return Err(DataError::NoCovariates);
        }
        let j = arm_labels.len();
        if j < 2 {
            return Err(DataError::TooFewArms(j));
        }
        if let Some(pos) = outcome.iter().position(|&y| y > 1) {
            return Err(DataError::NonBinaryOutcome {
                row: pos + 1,
                column: "outcome".into(),
                value: outcome[pos].to_string(),
            });
        }
        if let Some(pos) = covariates.iter().position(|v| !v.is_finite()) {
            return Err(DataError::MissingCell { row: pos / p + 1, column: columns[pos % p].name.clone() });
        }
        let mut counts = vec![0usize; j];
        for (i, &a) in treatment.iter().enumerate() {
            if a == 0 || a > j {
                return Err(DataError::Invalid(format!("row {}: arm {a} outside 1..{j}", i + 1)));
            }
            counts[a - 1] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(DataError::EmptyArm(arm_labels[empty]));
        }
        Ok(ObservationalDataset {
            n,
            p,
            covariates,
            columns,
            nominal: Vec::new(),
            treatment,
            outcome,
            arm_labels,
            outcome_name: "y".into(),
            treatment_name: "a".into(),
        })
    }

    pub fn with_names(mut self, outcome: &str, treatment: &str) -> Self {
        self.outcome_name = outcome.into();
        self.treatment_name = treatment.into();
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn n_arms(&self) -> usize {
        self.arm_labels.len()
    }
    pub fn columns(&self) -> &[ColumnMeta] {
        &self.columns
    }
    pub fn nominal(&self) -> &[NominalEncoding] {
        &self.nominal
    }
    pub fn treatment(&self) -> &[usize] {
        &self.treatment
    }
    pub fn outcome(&self) -> &[u8] {
        &self.outcome
    }
    pub fn arm_labels(&self) -> &[i64] {
        &self.arm_labels
    }
    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }
    pub fn treatment_name(&self) -> &str {
        &self.treatment_name
    }
    /// Row-major n×p covariate matrix.
    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.p..(i + 1) * self.p]
    }
    pub fn value(&self, i: usize, c: usize) -> f64 {
        self.covariates[i * self.p + c]
    }
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.value(i, c)).collect()
    }
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|m| m.name == name)
    }

    pub fn arm_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_arms()];
        for &a in &self.treatment {
            counts[a - 1] += 1;
        }
        counts
    }

    /// Maps an original treatment label to its arm index (1-based).
    pub fn arm_of_label(&self, label: i64) -> Option<usize> {
        self.arm_labels.iter().position(|&l| l == label).map(|i| i + 1)
    }

    /// Maps an arm index (1-based) back to the original label.
    pub fn label_of_arm(&self, arm: usize) -> i64 {
        self.arm_labels[arm - 1]
    }

    /// The same units with one more covariate column appended.
    pub fn with_covariate(&self, meta: ColumnMeta, values: &[f64]) -> Result<Self, DataError> {
        if values.len() != self.n {
            return Err(DataError::Dimension(format!("{} values for {} units", values.len(), self.n)));
        }
        let p = self.p + 1;
        let mut cov = Vec::with_capacity(self.n * p);
        for i in 0..self.n {
            cov.extend_from_slice(self.row(i));
            cov.push(values[i]);
        }
        let mut columns = self.columns.clone();
        columns.push(meta);
        let mut ds = ObservationalDataset::new(
            columns,
            cov,
            self.treatment.clone(),
            self.outcome.clone(),
            self.arm_labels.clone(),
        )?;
        ds.nominal = self.nominal.clone();
        ds.outcome_name = self.outcome_name.clone();
        ds.treatment_name = self.treatment_name.clone();
        Ok(ds)
    }

    /// The schema under which `save_csv` output reloads to this dataset.
    pub fn schema(&self) -> DatasetSchema {
        let mut covariates = Vec::new();
        let mut ordinal = Vec::new();
        let mut c = 0;
        while c < self.p {
            if let Some(enc) = self.nominal.iter().find(|e| e.first == c) {
                covariates.push(enc.column.clone());
                c += enc.levels.len() - 1;
                continue;
            }
            let meta = &self.columns[c];
            covariates.push(meta.name.clone());
            if meta.kind == ColumnKind::Ordinal {
                ordinal.push(meta.name.clone());
            }
            c += 1;
        }
        DatasetSchema {
            outcome: self.outcome_name.clone(),
            treatment: self.treatment_name.clone(),
            covariates,
            nominal: self.nominal.iter().map(|e| e.column.clone()).collect(),
            ordinal,
            arms: Some(self.arm_labels.clone()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Sorts level strings numerically when all parse as numbers, else lexically.
fn sort_levels(levels: BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = levels.into_iter().collect();
    if v.iter().all(|s| s.parse::<f64>().is_ok()) {
        v.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    v
}

/// Reads a dataset from a CSV file with a header row.
pub fn load_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<ObservationalDataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    read_csv(file, schema)
}

/// Reads a dataset from any CSV source; rows are numbered from 1 after the header.
pub fn read_csv<R: std::io::Read>(reader: R, schema: &DatasetSchema) -> Result<ObservationalDataset, DataError> {
    if schema.covariates.is_empty() {
        return Err(DataError::NoCovariates);
    }
    let mut seen = BTreeSet::new();
    for name in std::iter::once(&schema.outcome)
        .chain(std::iter::once(&schema.treatment))
        .chain(&schema.covariates)
    {
        if !seen.insert(name.as_str()) {
            return Err(DataError::DuplicateColumn(name.clone()));
        }
    }
    for name in schema.nominal.iter().chain(&schema.ordinal) {
        if !schema.covariates.contains(name) {
            return Err(DataError::Invalid(format!("'{name}' is typed but not listed as a covariate")));
        }
    }

    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| DataError::Csv { row: 0, message: e.to_string() })?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let y_col = find(&schema.outcome)?;
    let a_col = find(&schema.treatment)?;
    let x_cols: Vec<usize> = schema.covariates.iter().map(|c| find(c)).collect::<Result<_, _>>()?;

    let mut raw_labels = Vec::new();
    let mut outcome = Vec::new();
    let mut raw_x: Vec<Vec<String>> = vec![Vec::new(); x_cols.len()];
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| DataError::Csv { row, message: e.to_string() })?;
        let cell = |idx: usize, name: &str| -> Result<String, DataError> {
            match rec.get(idx) {
                Some(s) if !s.is_empty() && s != "NA" => Ok(s.to_string()),
                _ => Err(DataError::MissingCell { row, column: name.to_string() }),
            }
        };
        let y = cell(y_col, &schema.outcome)?;
        outcome.push(match y.as_str() {
            "0" => 0u8,
            "1" => 1u8,
            _ => return Err(DataError::NonBinaryOutcome { row, column: schema.outcome.clone(), value: y }),
        });
        let a = cell(a_col, &schema.treatment)?;
        let label: i64 = a.parse().map_err(|_| DataError::BadTreatment {
            row,
            column: schema.treatment.clone(),
            value: a.clone(),
        })?;
        if let Some(arms) = &schema.arms {
            if !arms.contains(&label) {
                return Err(DataError::UndeclaredArm { row, label });
            }
        }
        raw_labels.push(label);
        for (slot, (&idx, name)) in x_cols.iter().zip(&schema.covariates).enumerate() {
            raw_x[slot].push(cell(idx, name)?);
        }
    }

    let labels: Vec<i64> = match &schema.arms {
        Some(arms) => {
            let set: BTreeSet<i64> = arms.iter().copied().collect();
            set.into_iter().collect()
        }
        None => raw_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
    };
    if labels.len() < 2 {
        return Err(DataError::TooFewArms(labels.len()));
    }
    let index: BTreeMap<i64, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i + 1)).collect();
    let treatment: Vec<usize> = raw_labels.iter().map(|l| index[l]).collect();

    let n = outcome.len();
    let mut columns = Vec::new();
    let mut encoded: Vec<Vec<f64>> = Vec::new();
    let mut nominal = Vec::new();
    for (slot, name) in schema.covariates.iter().enumerate() {
        let cells = &raw_x[slot];
        if schema.nominal.contains(name) {
            let levels = sort_levels(cells.iter().cloned().collect());
            nominal.push(NominalEncoding { column: name.clone(), levels: levels.clone(), first: columns.len() });
            for level in &levels[1..] {
                columns.push(ColumnMeta { name: format!("{name}={level}"), kind: ColumnKind::Binary });
                encoded.push(cells.iter().map(|c| if c == level { 1.0 } else { 0.0 }).collect());
            }
            continue;
        }
        let mut vals = Vec::with_capacity(n);
        for (r, c) in cells.iter().enumerate() {
            let v: f64 = c.parse().map_err(|_| DataError::BadNumber {
                row: r + 1,
                column: name.clone(),
                value: c.clone(),
            })?;
            if !v.is_finite() {
                return Err(DataError::MissingCell { row: r + 1, column: name.clone() });
            }
            vals.push(v);
        }
        let kind = if schema.ordinal.contains(name) {
            if let Some(r) = vals.iter().position(|v| v.fract() != 0.0) {
                return Err(DataError::BadOrdinal { row: r + 1, column: name.clone(), value: cells[r].clone() });
            }
            ColumnKind::Ordinal
        } else if vals.iter().all(|&v| v == 0.0 || v == 1.0) {
            ColumnKind::Binary
        } else {
            ColumnKind::Continuous
        };
        columns.push(ColumnMeta { name: name.clone(), kind });
        encoded.push(vals);
    }

    let p = columns.len();
    if p == 0 {
        return Err(DataError::Invalid("every nominal covariate has a single level".into()));
    }
    let mut cov = vec![0.0; n * p];
    for (c, col) in encoded.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            cov[i * p + c] = v;
        }
    }
    let mut ds = ObservationalDataset::new(columns, cov, treatment, outcome, labels)?;
    ds.nominal = nominal;
    ds.outcome_name = schema.outcome.clone();
    ds.treatment_name = schema.treatment.clone();
    Ok(ds)
}

/// Writes the dataset with original treatment labels and nominal columns
/// collapsed back to their level strings.
pub fn save_csv(ds: &ObservationalDataset, path: impl AsRef<Path>) -> Result<DatasetSchema, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_csv(ds, file).map_err(|e| io_err(path, e))?;
    Ok(ds.schema())
}

pub fn write_csv<W: std::io::Write>(ds: &ObservationalDataset, writer: W) -> Result<(), csv::Error> {
    let schema = ds.schema();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![ds.outcome_name.clone(), ds.treatment_name.clone()];
    header.extend(schema.covariates.iter().cloned());
    w.write_record(&header)?;
    for i in 0..ds.n {
        let mut rec = vec![ds.outcome[i].to_string(), ds.label_of_arm(ds.treatment[i]).to_string()];
        let mut c = 0;
        while c < ds.p {
            if let Some(enc) = ds.nominal.iter().find(|e| e.first == c) {
                let width = enc.levels.len() - 1;
                let hit = (0..width).find(|&k| ds.value(i, c + k) == 1.0);
                rec.push(match hit {
                    Some(k) => enc.levels[k + 1].clone(),
                    None => enc.levels[0].clone(),
                });
                c += width;
            } else {
                rec.push(format!("{}", ds.value(i, c)));
                c += 1;
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// A unit whose posterior-mean GPS for some arm is outside `[eps, 1 - eps]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlaggedUnit {
    /// 0-based unit index.
    pub unit: usize,
    /// 1-based arm.
    pub arm: usize,
    pub mean_gps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub eps: f64,
    pub flagged: Vec<FlaggedUnit>,
}

/// Lists units with extreme posterior-mean GPS. Nothing is dropped.
pub fn validate_overlap(ds: &ObservationalDataset, gps: &GpsDraws, eps: f64) -> Result<OverlapReport, DataError> {
    let j = ds.n_arms();
    if gps.n() != ds.n() || gps.n_arms() != j {
        return Err(DataError::Dimension(format!(
            "GPS draws are {}x{} but the dataset has {} units and {} arms",
            gps.n(),
            gps.n_arms(),
            ds.n(),
            j
        )));
    }
    if !(eps > 0.0 && eps < 1.0 / j as f64) {
        return Err(DataError::Invalid(format!("eps must be < 1/J (got {eps}, J={j})")));
    }
    let mean = gps.posterior_mean();
    let mut flagged = Vec::new();
    for i in 0..ds.n() {
        for a in 0..j {
            let m = mean[i * j + a];
            if m < eps || m > 1.0 - eps {
                flagged.push(FlaggedUnit { unit: i, arm: a + 1, mean_gps: m });
            }
        }
    }
    Ok(OverlapReport { eps, flagged })
}
