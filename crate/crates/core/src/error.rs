use thiserror::Error;

/// Errors produced anywhere in the reconstruction toolkit.
///
/// Variants are grouped by how a caller should react: configuration problems
/// are fixed by editing the camera or parameters, domain errors are invalid
/// numeric inputs, processing errors mean the data did not support the
/// requested computation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("processing error: {0}")]
    Processing(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn processing<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Processing(msg.into()))
}
