use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field failed validation. Carries the field path.
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A numeric precondition was violated at a call site.
    #[error("domain error: {0}")]
    Domain(String),

    /// A sensor detected the target but could reach no mobile node or server.
    #[error("orphan sensor {sn_id}: no reachable offload destination")]
    OrphanSensor { sn_id: usize },

    /// Mode transition not allowed for the node kind.
    #[error("illegal mode transition: {0}")]
    IllegalTransition(String),

    /// Innovation covariance was singular; the EKF update is skipped.
    #[error("singular innovation covariance")]
    SingularInnovation,

    /// Action index outside the enumerated action space.
    #[error("invalid action index {index} (space has {count} actions)")]
    InvalidAction { index: usize, count: usize },

    /// Training loss stayed above the divergence bound.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("experiment error: {0}")]
    Experiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Process exit code per the CLI contract: 2 for config errors, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Toml(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
