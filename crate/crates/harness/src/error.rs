use std::path::PathBuf;

use thiserror::Error;

use crate::cache_file::CacheFileError;
use crate::heatmap::HeatmapError;
use crate::tensor_file::TensorFileError;

pub type Result<T> = std::result::Result<T, HarnessError>;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor file: {0}")]
    TensorFile(#[from] TensorFileError),

    #[error("cache file: {0}")]
    CacheFile(#[from] CacheFileError),

    #[error("heatmap: {0}")]
    Heatmap(#[from] HeatmapError),

    #[error("writing {what}: {detail}")]
    Encode { what: &'static str, detail: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Core(#[from] delta_attn::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 I/O and file formats,
    /// 4 invariant violations (including core errors other than config).
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Core(delta_attn::Error::Config(_)) => {
                EXIT_CONFIG
            }
            HarnessError::Io { .. }
            | HarnessError::TensorFile(_)
            | HarnessError::CacheFile(_)
            | HarnessError::Heatmap(_)
            | HarnessError::Encode { .. } => EXIT_IO,
            HarnessError::Invariant(_) | HarnessError::Core(_) => EXIT_INVARIANT,
        }
    }
}
