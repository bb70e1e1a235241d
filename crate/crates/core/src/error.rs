use thiserror::Error;

/// Errors raised by the model, estimators, tests and forecasting routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("insufficient data in regime {regime}: {got} transitions, need at least {need}")]
    InsufficientRegimeData {
        regime: u8,
        got: usize,
        need: usize,
    },

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("singular information matrix (condition number {condition:.3e})")]
    SingularInformation { condition: f64 },

    #[error("optimizer did not converge after {evaluations} evaluations (best value {best_value})")]
    Convergence {
        evaluations: usize,
        best_value: f64,
        best_point: [f64; 3],
    },

    #[error("truncation at max_state {max_state} too small: row {row} misses mass {deficit:.3e}; increase max_state")]
    Truncation {
        max_state: usize,
        row: usize,
        deficit: f64,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("no admissible threshold candidate in [{lo}, {hi}]")]
    NoCandidates { lo: u64, hi: u64 },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code used by the command-line tool for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Input(_) | Error::Io(_) | Error::Domain(_) => 2,
            Error::Truncation { .. } => 4,
            _ => 3,
        }
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::InsufficientRegimeData { .. } => "insufficient_regime_data",
            Error::SingularDesign(_) => "singular_design",
            Error::SingularInformation { .. } => "singular_information",
            Error::Convergence { .. } => "convergence",
            Error::Truncation { .. } => "truncation",
            Error::Parse { .. } => "parse",
            Error::Input(_) => "input",
            Error::NoCandidates { .. } => "no_candidates",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
