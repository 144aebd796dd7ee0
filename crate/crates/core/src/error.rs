use std::path::PathBuf;

/// Errors surfaced by the extraction library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed point file at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("truncated point file: record {record} (byte {offset}) is missing or incomplete")]
    Truncated { record: u64, offset: u64 },

    #[error("invalid value in record {record} at byte {offset}: {reason}")]
    InvalidRecord {
        record: u64,
        offset: u64,
        reason: String,
    },

    #[error("trajectory: {0}")]
    Trajectory(String),

    #[error("return {index} at t={t} lies outside the trajectory span [{start}, {end}]")]
    OutOfSpan {
        index: usize,
        t: f64,
        start: f64,
        end: f64,
    },

    #[error("geodesy: {0}")]
    Domain(String),

    #[error("station {station} m is outside the track span [0, {length}] m")]
    StationRange { station: f64, length: f64 },

    #[error("raster of {width}x{height} pixels exceeds the budget of {budget}")]
    RasterTooLarge {
        width: usize,
        height: usize,
        budget: usize,
    },

    #[error("pixel ({px}, {py}) outside a {width}x{height} image")]
    PixelRange {
        px: i64,
        py: i64,
        width: usize,
        height: usize,
    },

    #[error("lane {lane}: {reason}")]
    Encoding { lane: u32, reason: String },

    #[error("{field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
