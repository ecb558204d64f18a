use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("mesh has no non-degenerate faces")]
    AllFacesDegenerate,

    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { context: String, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("point is behind the camera near plane")]
    BehindCamera,

    #[error("temporal latent contains non-finite values")]
    NonFiniteLatent,

    #[error("pyramid entry for block {block} is {got}x{got}, expected {want}x{want}")]
    ResolutionMismatch { block: usize, got: usize, want: usize },

    #[error("weights file is missing tensor {0}")]
    SchemaMismatch(String),

    #[error("tracking data not found at {0}")]
    MissingTracking(PathBuf),

    #[error("tracking has {records} records for {frames} frames")]
    FrameCountMismatch { frames: usize, records: usize },

    #[error("frame {frame}: {kind} box {coords:?} invalid for {width}x{height} image")]
    BadBox { frame: usize, kind: String, coords: [f64; 4], width: usize, height: usize },

    #[error("landmark region box has no area")]
    DegenerateBox,

    #[error("frame {0} has no landmark boxes")]
    MissingLandmarks(usize),

    #[error("no perceptual feature extractor registered")]
    NoExtractor,

    #[error("stage 3 requires an initialized generator (run inversion or enable the built-in default)")]
    GeneratorNotInitialized,

    #[error("checkpoint at {path} holds stage {got}, expected stage {want}")]
    WrongStage { path: PathBuf, got: u8, want: u8 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("obj parse error at {path}:{line}: {msg}")]
    ObjParse { path: PathBuf, line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}
