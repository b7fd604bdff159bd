use std::path::PathBuf;

/// Crate-wide error type. Variants map onto CLI exit codes: I/O-flavored
/// failures exit 2, everything else exits 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("validation: {0}")]
    Validation(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("nan loss at iter {iter} (lr={lr}, batch_seed={batch_seed})")]
    NanLoss { iter: u64, lr: f64, batch_seed: u64 },

    #[error("parse error in {path:?} at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("corrupt file {path:?}: {msg}")]
    Corrupt { path: PathBuf, msg: String },

    #[error("unsupported checkpoint version {found:#010x} (supported: {supported})")]
    Version { found: u32, supported: String },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code for this error: 2 for I/O and file-format trouble,
    /// 1 for validation/usage problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Corrupt { .. } | Error::Io { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
