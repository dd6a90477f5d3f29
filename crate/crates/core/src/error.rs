use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("image size {height}x{width} is not divisible by the total stride {stride}; nearest valid size is {suggest_h}x{suggest_w}")]
    NotDivisible {
        height: usize,
        width: usize,
        stride: usize,
        suggest_h: usize,
        suggest_w: usize,
    },

    #[error("manifest {path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dataset entry {entry}: {msg}")]
    Data { entry: String, msg: String },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("scene error: {0}")]
    Scene(String),

    #[error("no valid pixels in frame {0}")]
    NoValidPixels(String),

    #[error("mask has no true pixels")]
    EmptyMask,

    #[error("non-finite loss at step {step}: {terms}")]
    NonFinite { step: usize, terms: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    SafeTensors(#[from] safetensors::SafeTensorError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
