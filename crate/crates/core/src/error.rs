use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("preprocessing error: {0}")]
    Preprocess(String),

    #[error("training diverged at round {round}: {msg}")]
    Divergence { round: usize, msg: String },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("attack failed: {0}")]
    Attack(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Parse { .. } => "parse",
            Error::Preprocess(_) => "preprocess",
            Error::Divergence { .. } => "divergence",
            Error::Estimation(_) => "estimation",
            Error::Attack(_) => "attack",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
