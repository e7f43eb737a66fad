use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("infeasible gains: {0}")]
    InfeasibleGains(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("self-check failed: {0}")]
    SelfCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Exit code used by the CLI: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::Singular(_) => "singular",
            Error::InfeasibleGains(_) => "infeasible_gains",
            Error::ModelFormat(_) => "model_format",
            Error::SelfCheck(_) => "self_check",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}

pub fn ensure_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what}: expected {expected}, got {got}")))
    }
}

pub(crate) fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
