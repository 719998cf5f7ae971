use std::io;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon has non-finite coordinates")]
    NonFinite,
    #[error("polygon has zero area")]
    ZeroArea,
    #[error("polygon is self-intersecting")]
    SelfIntersecting,
    #[error("offset of polygon degenerates (antiparallel edges)")]
    DegenerateOffset,
    #[error("task {0}: outer profile does not contain inner profile at alignment")]
    NotContained(String),
    #[error("socket footprints {0} and {1} overlap")]
    OverlappingSockets(usize, usize),
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("simulation produced a non-finite state (check gains and dt)")]
    NonFiniteState,
    #[error("invalid sim config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("image capture away from contact: peg tip {0:.4} m from the surface")]
    OutOfPlane(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Binary file errors shared by the dataset, parameter and reference formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated file")]
    TruncatedFile,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("goal pose of task {0} is not an inserted state")]
    GoalUnreachable(String),
    #[error("invalid collect config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
}

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("image is {got:?}, network expects {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizeError {
    #[error("localization failed: best correlation {best:.4} after {iterations} iterations")]
    LocalizationFailed { best: f64, iterations: usize },
    #[error("reference has no holes")]
    EmptyReference,
}

/// Top-level error for the harness and CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Collect(#[from] CollectError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Localize(#[from] LocalizeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code: 2 for configuration problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Geometry(_) => 2,
            Error::Format(FormatError::Io(e)) | Error::Io(e)
                if e.kind() == io::ErrorKind::NotFound =>
            {
                2
            }
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
