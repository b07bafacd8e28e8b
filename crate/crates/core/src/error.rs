//! Shared error type. Every fallible operation in the crate returns one of
//! these variants; `Error::name` yields the stable identifier that the CLI
//! prints on failure.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("IngestError: {0}")]
    Ingest(String),

    #[error("InsufficientDataError: class '{class}' has {have} train samples, need {need}")]
    InsufficientData {
        class: String,
        have: usize,
        need: usize,
    },

    #[error("CropError: {0}")]
    Crop(String),

    #[error("ConfigError: {0}")]
    Config(String),

    #[error("ShapeError: {0}")]
    Shape(String),

    #[error("ImportError: {0}")]
    Import(String),

    #[error("FitError: {0}")]
    Fit(String),

    #[error("TrainError: {0}")]
    Train(String),

    #[error("MetricError: {0}")]
    Metric(String),

    #[error("SampleError: {0}")]
    Sample(String),

    #[error("ReportError: {0}")]
    Report(String),

    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),

    #[error("FormatError: {0}")]
    Format(#[from] serde_json::Error),
}

impl Error {
    /// Stable structured name, used by the CLI error reporting.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Ingest(_) => "IngestError",
            Error::InsufficientData { .. } => "InsufficientDataError",
            Error::Crop(_) => "CropError",
            Error::Config(_) => "ConfigError",
            Error::Shape(_) => "ShapeError",
            Error::Import(_) => "ImportError",
            Error::Fit(_) => "FitError",
            Error::Train(_) => "TrainError",
            Error::Metric(_) => "MetricError",
            Error::Sample(_) => "SampleError",
            Error::Report(_) => "ReportError",
            Error::Io(_) => "IoError",
            Error::Format(_) => "FormatError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
