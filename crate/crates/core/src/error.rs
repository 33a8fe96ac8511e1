use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // matrix kernel
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("eigenvalue {0} lies on the closed negative real axis; no real principal logarithm")]
    EigenvalueOnBranchCut(f64),
    #[error("matrix is singular")]
    SingularMatrix,
    #[error("matrix is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("dynamics matrix has an eigenvalue with non-negative real part ({0:e})")]
    UnstableDynamics(f64),
    #[error("real Schur decomposition did not converge")]
    SchurFailed,

    // simulation
    #[error("mean dynamics is not stable")]
    UnstableMean,
    #[error("diffusion factor becomes negative (minimum {0:.6})")]
    DiffusionGoesNegative(f64),
    #[error("no stable system found after {0} draws")]
    RejectionBudgetExceeded(usize),
    #[error("numerical blow-up at step {0}; reduce dt")]
    NumericalBlowup(usize),
    #[error("stride {stride} does not divide {per_period} samples per period")]
    StrideMisaligned { stride: usize, per_period: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // estimation
    #[error("lag {lag} exceeds a record of {len} samples")]
    LagExceedsRecord { lag: usize, len: usize },
    #[error("no retained terms for lag {lag}, phase {phase}")]
    EmptyCell { lag: usize, phase: usize },
    #[error("periodic differencing needs at least {needed} phases, got {got}")]
    TooFewPhases { needed: usize, got: usize },

    // models
    #[error("covariance is singular or ill-conditioned (condition number {0:e})")]
    SingularCovariance(f64),
    #[error("{samples} samples per period cannot be split into {intervals} intervals")]
    IndivisibleInterval { samples: usize, intervals: usize },
    #[error("phase grids do not match: {0}")]
    GridMismatch(String),

    // post-processing
    #[error("moving-average window {window} must be odd and in 1..={period}")]
    BadWindow { window: usize, period: usize },
    #[error("low-pass cutoff {cutoff} exceeds {max}")]
    BadCutoff { cutoff: usize, max: usize },
    #[error("reference has zero norm")]
    ZeroTruth,
    #[error("every phase of the model is flagged")]
    AllPhasesFlagged,
    #[error("series have no common phases")]
    EmptyOverlap,

    // data
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("gap or duplicate in monthly record at line {line}: expected {expected}, found {found}")]
    GapInRecord {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("record too short: need {needed}, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("i/o error: {0}")]
    Io(String),

    // harness
    #[error("unknown plot kind {0:?}")]
    UnknownKind(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    /// Whether the error comes from input data rather than configuration or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::GapInRecord { .. } | Error::TooShort { .. } | Error::Io(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::Parse {
            line,
            msg: e.to_string(),
        }
    }
}
