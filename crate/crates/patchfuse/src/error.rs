//! Library-wide error type with machine-readable categories.

use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("train: {0}")]
    Train(String),
}

impl Error {
    /// Stable category token for scripting against the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "shape",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Io(_) => "io",
            Error::Image(_) => "io",
            Error::Checkpoint(_) => "checkpoint",
            Error::Train(_) => "train",
        }
    }

    /// Process exit code for the CLI; every category is distinct and
    /// nonzero.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "data" => 3,
            "io" => 4,
            "shape" => 5,
            "checkpoint" => 6,
            "train" => 7,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
