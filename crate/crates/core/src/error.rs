use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// The steering tangent `tan(kappa * delta_t)` is undefined or too close
    /// to its pole.
    #[error("model evaluated outside its domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sample timestamp {got} does not follow {last} by one sampling interval")]
    Timestamp { last: f64, got: f64 },

    #[error("estimation window is empty")]
    EmptyWindow,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
