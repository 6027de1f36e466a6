use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("replay buffer not ready: {0}")]
    NotReady(String),
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error("resume refused: {0}")]
    Resume(String),
    #[error("missing metrics: {0}")]
    MissingMetrics(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("plot error: {0}")]
    Plot(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
