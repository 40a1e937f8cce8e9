use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(f64),

    #[error("invalid scale {0}: scales must be positive and finite")]
    InvalidScale(f64),

    #[error("invalid {format} encoding {bits:#04x}")]
    InvalidEncoding { format: &'static str, bits: u8 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tensor `{0}` has no elements")]
    EmptyTensor(String),

    #[error("shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("loss increased from {prev} to {cur}")]
    LossIncreased { prev: f64, cur: f64 },

    #[error("checkpoint parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("corrupt artifact at byte {offset}: {msg}")]
    Corrupt { offset: u64, msg: String },

    #[error("unsupported container version {0}")]
    Version(u16),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
