use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraftError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    Numerical(String),

    #[error("subject `{0}` not found")]
    NotFound(String),

    #[error("empty subject mask")]
    EmptySubject,

    #[error("degenerate paste size: {0}")]
    Size(String),

    #[error("invalid scene: {0}")]
    Spec(String),

    #[error("no trajectory entry for t = {0}")]
    TrajectoryMismatch(f32),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("{stage} failed for subject `{subject}`: {source}")]
    Stage {
        stage: &'static str,
        subject: String,
        #[source]
        source: Box<GraftError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
}

impl GraftError {
    pub fn in_stage(self, stage: &'static str, subject: &str) -> Self {
        GraftError::Stage {
            stage,
            subject: subject.to_string(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by user-supplied configuration rather than a
    /// failing pipeline stage.
    pub fn is_config(&self) -> bool {
        matches!(self, GraftError::Config(_) | GraftError::Domain(_))
    }
}

pub type Result<T> = std::result::Result<T, GraftError>;
