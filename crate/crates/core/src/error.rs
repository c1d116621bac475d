use std::path::PathBuf;

/// Errors raised by the pipeline and its stages.
#[derive(Debug, thiserror::Error)]
pub enum FotError {
    #[error("config: {0}")]
    Config(String),

    #[error("missing directory: {}", .0.display())]
    MissingDirectory(PathBuf),

    #[error("unassigned class: {0}")]
    UnassignedClass(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("no salient region in {0}")]
    NoSalientRegion(String),

    #[error("saliency unavailable for {0}: no backend loaded and cache miss, precompute maps first")]
    SaliencyUnavailable(String),

    #[error("mine D_g first: quadruplet manifest has no usable entries")]
    EmptyManifest,

    #[error("component mismatch: {0}")]
    Component(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<FotError>,
    },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle::Error),

    #[error("safetensors: {0}")]
    SafeTensors(#[from] safetensors::SafeTensorError),
}

pub type Result<T> = std::result::Result<T, FotError>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| FotError::Io {
            path: path.into(),
            source,
        })
    }
}
