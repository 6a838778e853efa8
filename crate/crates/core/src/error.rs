//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate range: lb={lb} ub={ub}")]
    DegenerateRange { lb: f64, ub: f64 },

    #[error("log2 domain: {0} is not in (0, 1]")]
    Log2Domain(f64),

    #[error("A̅ out of range: {0} < 0")]
    AbarOutOfRange(f64),

    #[error("invalid quantizer parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite activation")]
    NonFinite,

    #[error("time step {t} out of range for sequence length {len}")]
    TimeStepOutOfRange { t: usize, len: usize },

    #[error("missing quantizer assignment for `{0}`")]
    MissingAssignment(String),

    #[error("unknown target `{0}`")]
    UnknownTarget(String),

    #[error("unknown profile `{0}`")]
    UnknownProfile(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing forward trace: {0}")]
    MissingTrace(&'static str),

    #[error("unreachable median {target} after {iterations} bisection steps")]
    UnreachableMedian { target: f64, iterations: usize },

    #[error("loss became non-finite at iteration {iteration} (lr={lr}, last finite loss={last_loss})")]
    NonFiniteLoss { iteration: usize, lr: f64, last_loss: f64 },

    #[error("task too hard for spec: validation accuracy {accuracy:.4} below {required:.2} at the iteration cap")]
    TaskTooHard { accuracy: f64, required: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Stable machine-readable identifier, used by the CLI error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyInput => "empty_input",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::DegenerateRange { .. } => "degenerate_range",
            Error::Log2Domain(_) => "log2_domain",
            Error::AbarOutOfRange(_) => "abar_out_of_range",
            Error::InvalidParams(_) => "invalid_params",
            Error::NonFinite => "non_finite_activation",
            Error::TimeStepOutOfRange { .. } => "time_step_out_of_range",
            Error::MissingAssignment(_) => "missing_assignment",
            Error::UnknownTarget(_) => "unknown_target",
            Error::UnknownProfile(_) => "unknown_profile",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "invalid_config",
            Error::MissingTrace(_) => "missing_trace",
            Error::UnreachableMedian { .. } => "unreachable_median",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::TaskTooHard { .. } => "task_too_hard",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Toml(_) => "toml",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
