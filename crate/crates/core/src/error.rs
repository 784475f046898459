//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("malformed binary graph file {path}: {msg}")]
    BadBinary { path: PathBuf, msg: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("latent space size (t+1)^d overflows u128 for t={t}, d={d}")]
    LatentSizeOverflow { t: usize, d: usize },

    #[error("training diverged at epoch {epoch}: loss is not finite ({loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("malformed checkpoint {path}: {msg}")]
    BadCheckpoint { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;
