//! Error type shared by every layer of the toolchain.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by checkers, evaluators and interpreters.
///
/// Every variant maps to one stable diagnostic code (see [`Error::code`]).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("malformed pattern: {0}")]
    MalformedPattern(String),
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("linearity violation: {0}")]
    Linearity(String),
    #[error("linear combination is not normalized (squared norm {0})")]
    NotNormalized(f64),
    #[error("summands are not orthogonal: {0}")]
    NonOrthogonal(String),
    #[error("type mismatch: expected {expected}, found {found}")]
    TypeMismatch { expected: String, found: String },
    #[error("patterns do not form an orthonormal basis of {0}")]
    NonOnbPatterns(String),
    #[error("clause bodies do not form an orthonormal basis of {0}")]
    NonOnbBodies(String),
    #[error("clause context mismatch: {0}")]
    ClauseContext(String),
    #[error("lift under a non-duplicable context: {0}")]
    LiftNonBang(String),
    #[error("modality mismatch: {0}")]
    Modality(String),
    #[error("truncation overflow: {0}")]
    Truncation(String),
    #[error("dimension {0} exceeds the dense matrix cap")]
    DimensionCap(usize),
    #[error("construct outside the first-order fragment: {0}")]
    Unsupported(String),
    #[error("ill-formed configuration: {0}")]
    Configuration(String),
    #[error("{message}")]
    Syntax { message: String, line: usize, col: usize },
    #[error("unknown name `{0}`")]
    UnknownName(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    /// Stable machine-readable code for diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Malformed(_) => "E0001",
            Error::MalformedPattern(_) => "E0002",
            Error::Unbound(_) => "E0003",
            Error::Linearity(_) => "E0004",
            Error::NotNormalized(_) => "E0005",
            Error::NonOrthogonal(_) => "E0006",
            Error::TypeMismatch { .. } => "E0007",
            Error::NonOnbPatterns(_) => "E0008",
            Error::NonOnbBodies(_) => "E0009",
            Error::ClauseContext(_) => "E0010",
            Error::LiftNonBang(_) => "E0011",
            Error::Modality(_) => "E0012",
            Error::Truncation(_) => "E0013",
            Error::DimensionCap(_) => "E0014",
            Error::Unsupported(_) => "E0015",
            Error::Configuration(_) => "E0016",
            Error::Syntax { .. } => "E0017",
            Error::UnknownName(_) => "E0018",
            Error::Internal(_) => "E0999",
        }
    }

    /// True for errors that signal a bug rather than a user mistake.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Internal(_))
    }

    pub(crate) fn mismatch(expected: impl ToString, found: impl ToString) -> Self {
        Error::TypeMismatch { expected: expected.to_string(), found: found.to_string() }
    }
}
