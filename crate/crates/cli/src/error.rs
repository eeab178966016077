use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, manifests, adapters or paths; maps to exit code 3.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("sample '{id}': {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<CliError>,
    },

    #[error("no heatmap for sample '{id}' at {}", path.display())]
    MissingHeatmap { id: String, path: PathBuf },

    #[error(transparent)]
    Core(#[from] openlens_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn for_sample(self, id: &str) -> Self {
        CliError::Sample {
            id: id.to_string(),
            source: Box::new(self),
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, CliError::Config(_))
    }
}
