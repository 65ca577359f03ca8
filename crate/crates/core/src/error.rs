use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is invalid. `field` is the dotted config path.
    #[error("configuration error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("input error: {0}")]
    Input(String),

    /// The requested patch grid cannot be drawn from a stage feature.
    #[error("resolution error at stage {stage}: {msg}")]
    Resolution { stage: usize, msg: String },

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("binding error: {0}")]
    Binding(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("contract error: {0}")]
    Contract(String),

    /// A loss component became NaN or infinite.
    #[error("numeric error: component `{component}` is not finite ({value})")]
    Numeric { component: String, value: f64 },

    /// Malformed dataset file; `offset` is the byte offset where decoding failed.
    #[error("data error in {path} at byte {offset}: {msg}")]
    Data {
        path: String,
        offset: u64,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// True for errors the CLI reports with the configuration exit code.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Usage(_))
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}
