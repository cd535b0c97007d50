use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("validation error: {0}")]
    Validation(String),
    /// A point ended up at or behind the image plane.
    #[error("behind camera: {0}")]
    BehindCamera(String),
    /// The optimizer pushed a joint behind the camera; carries the last
    /// translation that kept every joint in front.
    #[error("projected depth became non-positive at frame {frame}")]
    ProjectedDepth { frame: usize, last_valid: [f64; 3] },
    #[error("support error: {0}")]
    Support(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing {stage} checkpoint {path}; create it with `cosh {command}`")]
    MissingCheckpoint { stage: String, path: String, command: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
