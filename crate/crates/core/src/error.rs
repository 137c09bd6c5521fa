use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("config error: {0}")]
    Config(String),

    /// Several validation failures collected in one pass.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    ConfigList(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("novel class {0} has no samples in the dataset")]
    EmptyNovelClass(String),

    #[error("no normal data: {0}")]
    NoNormalData(String),

    #[error("image files missing on disk for ids: {}", .0.join(", "))]
    MissingImages(Vec<String>),

    #[error("degenerate score range: min = max = {0}")]
    DegenerateRange(f64),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("score set is label dependent and cannot be used for deployment decisions")]
    LabelDependent,

    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end:
    /// 2 = configuration, 3 = data, 4 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigList(_) => 2,
            Error::Numeric(_) | Error::DegenerateRange(_) => 4,
            _ => 3,
        }
    }
}
