use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("timestep {t} outside [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("not enough index entries: K={k} but only {available} available")]
    NotEnoughNeighbors { k: usize, available: usize },

    #[error(
        "all training mean distances equal {value}; bins are degenerate, \
         fall back to static conditioning (fixed step)"
    )]
    DegenerateBins { value: f64 },

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { loss: f32, epoch: usize, step: usize },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("checkpoint is missing array `{name}`")]
    MissingArray { name: String },

    #[error("layer `{layer}`: {msg}")]
    Layer { layer: String, msg: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("dataset error at {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short stable identifier, used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::TimestepOutOfRange { .. } => "timestep_out_of_range",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::InvalidConfig(_) => "invalid_config",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::NotEnoughNeighbors { .. } => "not_enough_neighbors",
            Error::DegenerateBins { .. } => "degenerate_bins",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint { .. } => "checkpoint",
            Error::MissingArray { .. } => "missing_array",
            Error::Layer { .. } => "layer_mismatch",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Dataset { .. } => "dataset",
            Error::Metric(_) => "metric",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Format(_) => "format",
            Error::Tensor(_) => "tensor",
        }
    }

    /// The file the error is about, when there is one.
    pub fn path(&self) -> Option<&Path> {
        match self {
            Error::Checkpoint { path, .. }
            | Error::Dataset { path, .. }
            | Error::Io { path, .. }
            | Error::Image { path, .. } => Some(path),
            Error::MissingArtifact(path) => Some(path),
            _ => None,
        }
    }
}
