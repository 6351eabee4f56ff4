use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum IcdError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("non-finite state at solver step {step}")]
    Solver { step: usize },

    #[error("non-finite output in {stage}")]
    Pipeline { stage: &'static str },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IcdError {
    /// Stable short tag for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            IcdError::Dimension { .. } => "dimension",
            IcdError::Contract(_) => "contract",
            IcdError::Range(_) => "range",
            IcdError::Training { .. } => "training",
            IcdError::Solver { .. } => "solver",
            IcdError::Pipeline { .. } => "pipeline",
            IcdError::Version { .. } => "version",
            IcdError::Checkpoint(_) => "checkpoint",
            IcdError::Parse { .. } => "parse",
            IcdError::Io(_) => "io",
        }
    }
}

pub type Result<T, E = IcdError> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> IcdError {
    IcdError::Contract(msg.into())
}
