use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. The variants are grouped by how the CLI maps them
/// to exit codes: precondition-style failures (bad input, unmet hypotheses,
/// unsupported dimensions, parse errors) exit with 2, verification failures
/// (a built object failed its own checks) exit with 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a documented precondition of the operation.
    #[error("precondition: {0}")]
    Precondition(String),

    /// The requested configuration is outside the supported range.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A constructed object failed one of its own verification checks.
    #[error("verification: {0}")]
    Verification(String),

    /// Sampled geometry degenerated (for example more than half of the
    /// dilation samples landed on creases).
    #[error("geometry: {0}")]
    Geometry(String),

    /// An embedding could not be realized inside the target box.
    #[error("embedding infeasible: {0}")]
    Infeasible(String),

    /// A measured constant exceeded the configured budget.
    #[error("budget exceeded: measured {measured} > budget {budget} ({context})")]
    BudgetExceeded {
        measured: f64,
        budget: f64,
        context: String,
    },

    /// Finite-difference stencil straddles a piece boundary; the caller
    /// should resample.
    #[error("crease: jacobian stencil straddles a piece boundary at {0:?}")]
    Crease(Vec<f64>),

    /// Malformed input file.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn verification(msg: impl Into<String>) -> Self {
        Error::Verification(msg.into())
    }

    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Verification(_) | Error::Geometry(_) | Error::BudgetExceeded { .. } => 3,
            _ => 2,
        }
    }
}
