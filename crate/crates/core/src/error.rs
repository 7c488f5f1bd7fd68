use std::path::PathBuf;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite entry at ({row},{col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("non-uniform sampling at row {row}")]
    NonUniformSampling { row: usize },

    #[error("unparsable numeric cell '{cell}' at row {row}, column '{column}'")]
    Parse {
        row: usize,
        column: String,
        cell: String,
    },

    #[error("constant channel '{0}' cannot be normalized (zero standard deviation)")]
    ConstantChannel(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("variable belongs to a different tape")]
    ForeignTape,

    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("line search stalled after 40 halvings at iteration {iteration}")]
    LineSearchStall { iteration: usize },

    #[error("Levenberg-Marquardt stalled: damping reached {lambda:e} without a decrease")]
    LmStall { lambda: f64 },

    #[error("singular matrix in {context} (condition estimate {condition:e})")]
    Singular { context: String, condition: f64 },

    #[error("rank-deficient regression; dependent columns: {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("rollout diverged at step {step}{}", segment.map(|s| format!(" (segment {s})")).unwrap_or_default())]
    Divergence { step: usize, segment: Option<usize> },

    #[error("training diverged in epoch {epoch}, segment {segment}")]
    TrainingDivergence { epoch: usize, segment: usize },

    #[error("every regressor was eliminated (lambda {lambda} too large)")]
    AllRegressorsEliminated { lambda: f64 },

    #[error("unknown variable '{0}'")]
    UnknownVariable(String),

    #[error("duplicate regressor '{0}'")]
    DuplicateRegressor(String),

    #[error("unknown benchmark system '{0}'")]
    UnknownSystem(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model document error: {0}")]
    Document(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            InvalidArgument(_) | Config(_) | UnknownSystem(_) | UnknownVariable(_)
            | DuplicateRegressor(_) => ErrorKind::Config,
            DimensionMismatch(_) | NonFinite { .. } | MissingColumn(_) | NonUniformSampling { .. }
            | Parse { .. } | ConstantChannel(_) | Io { .. } | Csv(_) | Document(_) => ErrorKind::Data,
            Shape { .. } | ForeignTape | NonFiniteValue(_) | NonFiniteGradient
            | LineSearchStall { .. } | LmStall { .. } | Singular { .. } | RankDeficient { .. }
            | Divergence { .. } | TrainingDivergence { .. } | AllRegressorsEliminated { .. } => {
                ErrorKind::Numerical
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
