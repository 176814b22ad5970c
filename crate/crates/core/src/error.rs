use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric failure: {message} (residual {residual:e})")]
    NumericFailure { message: String, residual: f64 },

    #[error("degenerate calibration: full and empty capacitances coincide at offset {offset}, electrode {electrode}")]
    DegenerateCalibration { offset: usize, electrode: usize },

    #[error("phantom generation failed: {0}")]
    GenerationFailure(String),

    #[error("sample {index}: {source}")]
    Sample { index: usize, source: Box<Error> },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (loss weights {lambdas:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        lambdas: [f64; 3],
    },

    #[error(transparent)]
    Tensor(#[from] ect_autodiff::Error),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn in_sample(self, index: usize) -> Self {
        Error::Sample {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
