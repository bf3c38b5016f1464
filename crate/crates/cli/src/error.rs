use std::fmt;

use mtsens::confounding::ConfoundingError;
use mtsens::dataset::DataError;
use mtsens::engine::EngineError;
use mtsens::gps::GpsError;
use mtsens::linalg::LinalgError;
use mtsens::simlab::SimError;
use mtsens::sumtrees::TreeError;

/// Error carrying its exit code class.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or request (exit 1).
    Usage(String),
    /// Input data rejected (exit 2).
    Data(String),
    /// A model failed to fit (exit 3).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn context(self, ctx: &str) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{ctx}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{ctx}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("{ctx}: {m}")),
        }
    }

    pub fn io(what: &str, e: impl fmt::Display) -> Self {
        CliError::Usage(format!("{what}: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, m) = match self {
            CliError::Usage(m) => ("error", m),
            CliError::Data(m) => ("data error", m),
            CliError::Numeric(m) => ("numeric failure", m),
        };
        write!(f, "{kind}: {m}")
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::Collinear(_) | LinalgError::Dimension(_) => CliError::Data(e.to_string()),
            LinalgError::NotPositiveDefinite => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ConfoundingError> for CliError {
    fn from(e: ConfoundingError) -> Self {
        match e {
            ConfoundingError::InvalidPrior { .. } | ConfoundingError::Prior(_) | ConfoundingError::BadPair(..) => {
                CliError::Usage(e.to_string())
            }
            ConfoundingError::Linalg(l) => l.into(),
            ConfoundingError::NotSimplex { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GpsError> for CliError {
    fn from(e: GpsError) -> Self {
        match e {
            GpsError::NonConvergence { .. } => CliError::Numeric(e.to_string()),
            GpsError::TooManyStrata(_) | GpsError::EmptyStratum(_) | GpsError::Dimension(_) => CliError::Data(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TreeError> for CliError {
    fn from(e: TreeError) -> Self {
        match e {
            TreeError::Config(_) => CliError::Usage(e.to_string()),
            TreeError::TooFewUnits(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Data(d) => d.into(),
            EngineError::Confounding(c) => c.into(),
            EngineError::Gps(g) => g.into(),
            EngineError::Tree(t) => t.into(),
            EngineError::Fit { m1, m2, source } => CliError::from(source).context(&format!("fit (m1={m1}, m2={m2})")),
            EngineError::Config(m) => CliError::Usage(m),
            EngineError::Ragged { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Data(d) => d.into(),
            SimError::Confounding(c) => c.into(),
            SimError::Gps(g) => g.into(),
            SimError::Engine(x) => x.into(),
            SimError::Config(_) | SimError::GridTooFine { .. } => CliError::Usage(e.to_string()),
        }
    }
}
