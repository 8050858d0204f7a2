use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("attention mask row {row} has no visible position")]
    EmptyMaskRow { row: usize },

    #[error("target id {id} out of range for vocabulary of size {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },

    #[error("code {code} out of range for codebook of size {size}")]
    CodeOutOfRange { code: usize, size: usize },

    #[error("empty codebook")]
    EmptyCodebook,

    #[error("function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("unknown language tag `{0}`")]
    UnknownLanguage(String),

    #[error("canvas must be {expected_h}x{expected_w}x{expected_c}, got {h}x{w}x{c}")]
    Canvas {
        expected_h: usize,
        expected_w: usize,
        expected_c: usize,
        h: usize,
        w: usize,
        c: usize,
    },

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("invalid config value for `{field}`: {message}")]
    ConfigValue { field: String, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint dependency error: {0}")]
    Dependency(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(String),

    #[error("render failure: {0}")]
    Render(#[from] crate::data::RenderError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
