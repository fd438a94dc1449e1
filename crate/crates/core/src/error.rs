use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("partition error: H={h}, W={w} not divisible by S={s}")]
    Partition { h: usize, w: usize, s: usize },

    #[error("index error: {0}")]
    Index(String),

    #[error("pipeline error at node {node}: {reason}")]
    Pipeline { node: String, reason: String },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Wraps any error raised while evaluating a named pyramid node.
    pub(crate) fn at_node(node: &str, err: Error) -> Self {
        match err {
            Error::Pipeline { .. } => err,
            other => Error::Pipeline {
                node: node.to_string(),
                reason: other.to_string(),
            },
        }
    }
}
