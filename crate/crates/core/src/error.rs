use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is incompatible with another one (e.g. a grid
    /// spacing that does not resolve the hole faces).
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Every problem found while validating a configuration file.
    #[error("{}", format_issues(.0))]
    ConfigIssues(Vec<(String, String)>),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("iterative solver did not converge after {iterations} iterations (relative residual {residual:.3e}, tolerance {tolerance:.1e})")]
    Solver {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("solution blew up at step {step} (t = {time})")]
    BlowUp { step: usize, time: f64 },

    #[error("trajectory has no noise log; record it with `record_noise = true`")]
    MissingNoiseLog,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } | Error::ConfigIssues(_) => "config",
            Error::Validation(_) => "validation",
            Error::ShapeMismatch { .. } => "shape",
            Error::Solver { .. } => "solver",
            Error::BlowUp { .. } => "blow-up",
            Error::MissingNoiseLog => "missing-noise-log",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

fn format_issues(issues: &[(String, String)]) -> String {
    let mut out = format!("{} configuration error(s):", issues.len());
    for (field, message) in issues {
        out.push_str(&format!("\n  `{field}`: {message}"));
    }
    out
}
