use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("payload size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("unsupported element type `{0}`")]
    UnsupportedElementType(String),

    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid label value {value} at voxel {index}")]
    InvalidLabelValue { value: u8, index: usize },

    #[error("invalid spacing {0:?}: components must be finite and positive")]
    InvalidSpacing([f64; 3]),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("trilinear interpolation is not defined for label volumes")]
    LabelInterpolation,

    #[error("label volume has no foreground voxels")]
    EmptyForeground,

    #[error("degenerate landmark configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("insufficient landmarks: {present} shared, at least 3 required")]
    InsufficientLandmarks { present: usize },

    #[error("class {class} has vanishing soft mass {mass:e}")]
    VanishingMass { class: &'static str, mass: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("ground truth is not one-hot at voxel {0}")]
    NotOneHot(usize),

    #[error("no usable reference statistics for {0}")]
    NoUsableStats(&'static str),

    #[error("unknown loss `{0}`")]
    UnknownLoss(String),

    #[error("class {0} has an empty surface in at least one volume")]
    EmptySurface(&'static str),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("feature arity mismatch: model expects {expected}, got {actual}")]
    ArityMismatch { expected: usize, actual: usize },

    #[error("non-finite loss at epoch {epoch}")]
    NonfiniteLoss { epoch: usize },

    #[error("degenerate phantom spec: {0}")]
    DegenerateSpec(String),

    #[error("unknown mode `{0}`")]
    UnknownMode(String),

    #[error("invalid document: {0}")]
    InvalidDocument(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Variant name, used in single-line CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedHeader { .. } => "MalformedHeader",
            Error::SizeMismatch { .. } => "SizeMismatch",
            Error::UnsupportedElementType(_) => "UnsupportedElementType",
            Error::IoFailure { .. } => "IoFailure",
            Error::InvalidLabelValue { .. } => "InvalidLabelValue",
            Error::InvalidSpacing(_) => "InvalidSpacing",
            Error::InvalidVolume(_) => "InvalidVolume",
            Error::LabelInterpolation => "LabelInterpolation",
            Error::EmptyForeground => "EmptyForeground",
            Error::DegenerateConfiguration(_) => "DegenerateConfiguration",
            Error::InsufficientLandmarks { .. } => "InsufficientLandmarks",
            Error::VanishingMass { .. } => "VanishingMass",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NotOneHot(_) => "NotOneHot",
            Error::NoUsableStats(_) => "NoUsableStats",
            Error::UnknownLoss(_) => "UnknownLoss",
            Error::EmptySurface(_) => "EmptySurface",
            Error::GridMismatch(_) => "GridMismatch",
            Error::ArityMismatch { .. } => "ArityMismatch",
            Error::NonfiniteLoss { .. } => "NonfiniteLoss",
            Error::DegenerateSpec(_) => "DegenerateSpec",
            Error::UnknownMode(_) => "UnknownMode",
            Error::InvalidDocument(_) => "InvalidDocument",
            Error::Json(_) => "Json",
            Error::Toml(_) => "Toml",
        }
    }

    /// True for failures that are not attributable to bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::NonfiniteLoss { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
