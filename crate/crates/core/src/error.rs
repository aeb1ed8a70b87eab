use thiserror::Error;

use crate::backends::BackendKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("pixel buffer holds {actual} pixels, expected {expected}")]
    PixelCount { expected: usize, actual: usize },
    #[error("image {width}x{height} is smaller than the {cols}x{rows} CLAHE grid")]
    TooSmallForGrid {
        width: usize,
        height: usize,
        cols: usize,
        rows: usize,
    },
    #[error("image {width}x{height} is below the {min}x{min} detector minimum")]
    BelowDetectorMinimum { width: usize, height: usize, min: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polygon needs at least 3 distinct vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon has non-finite coordinates")]
    NonFinite,
    #[error("polygon is self-intersecting")]
    SelfIntersecting,
    #[error("polygon has zero perimeter")]
    ZeroPerimeter,
    #[error("negative offset distance {0}")]
    NegativeOffset(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("score maps disagree in size: {0}")]
    DimensionMismatch(String),
    #[error("score map value {value} at index {index} is outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f32 },
    #[error("invalid detection parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("framing error: {0}")]
    Framing(String),
    #[error("response id {got} does not match request id {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("backend call timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("backend returned {got} results for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("backend contract violated: {0}")]
    Contract(String),
    #[error("backend reported an error: {0}")]
    Remote(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("premise is empty")]
    EmptyPremise,
    #[error("invalid label set: {0}")]
    InvalidLabels(String),
    #[error("invalid hypothesis template: {0}")]
    InvalidTemplate(String),
    #[error("{regions} regions but {texts} texts")]
    LengthMismatch { regions: usize, texts: usize },
    #[error("nli scorer failed: {0}")]
    Backend(#[from] BackendError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Top-level pipeline error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error("{kind} backend: {source}")]
    Backend {
        kind: BackendKind,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl Error {
    pub fn backend(kind: BackendKind, source: BackendError) -> Self {
        Error::Backend { kind, source }
    }
}
