use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown regime `{0}`")]
    UnknownRegime(String),

    #[error("unknown experiment family `{0}`")]
    UnknownFamily(String),

    #[error("lifecycle contract violated: {0}")]
    Lifecycle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config encode error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
