use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point at index {index} has non-positive depth {depth} in the camera frame")]
    NonPositiveDepth { index: usize, depth: f64 },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("no visible keypoints")]
    AllInvisible,

    #[error("no visible keypoints to evaluate")]
    NoVisibleKeypoints,

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("scene has no ground-truth 3D keypoints")]
    MissingGroundTruth,

    #[error("degenerate scene: only {surviving} points survived occlusion (need {required})")]
    DegenerateScene { surviving: usize, required: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("activation cache does not match the forward input: {0}")]
    CacheMismatch(String),

    #[error("loss became non-finite at step {step}")]
    DivergenceDetected { step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
