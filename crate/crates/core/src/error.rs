use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("topology error: edge ({0}, {1}) has {2} incident faces, expected 2")]
    Topology(usize, usize, usize),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: index {index} out of bounds for length {len}")]
    Index { index: usize, len: usize },

    #[error("level error: {0}")]
    Level(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
