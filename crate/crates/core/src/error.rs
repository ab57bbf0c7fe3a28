use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("spectral grid {start}-{end} nm does not cover the {need_lo}-{need_hi} nm range")]
    Coverage {
        start: f64,
        end: f64,
        need_lo: f64,
        need_hi: f64,
    },

    #[error("expected a {expected} image, got {found}")]
    Unit {
        expected: &'static str,
        found: &'static str,
    },

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("field-of-view error: {0}")]
    FieldOfView(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("average precision undefined: {0}")]
    UndefinedAp(String),

    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),

    #[error("detections reference unknown image id `{0}`")]
    UnknownImage(String),

    #[error("invalid detection: {0}")]
    InvalidDetection(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("content hash collision for {key}: stored task differs from requested task")]
    HashCollision { key: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by a bad configuration rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Domain(_) | Error::FieldOfView(_) | Error::Sampling(_)
        )
    }
}
