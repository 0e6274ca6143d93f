use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate point pair: the two points coincide")]
    DegeneratePair,
    #[error("zero-length vector has no direction")]
    ZeroVector,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid polyline: {0}")]
    InvalidPolyline(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot 2x2 pool odd spatial size {height}x{width}")]
    OddSpatialSize { height: usize, width: usize },
    #[error("variable was not recorded on this graph")]
    UnrecordedTensor,

    #[error("bad heatmap size: {0}")]
    BadSize(String),

    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, sample {sample}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        sample: usize,
        detail: String,
    },

    #[error("schema has no mirror table")]
    MissingMirrorTable,
    #[error("degenerate {0} axis: endpoints coincide")]
    DegenerateAxis(&'static str),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("reference length is zero")]
    ZeroReferenceLength,
    #[error("series lengths differ ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} subjects, got {got}")]
    TooFewSubjects { needed: usize, got: usize },

    #[error("phantom geometry does not fit the image: {0}")]
    GeometryOverflow(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse classification used by the command line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite(_)
            | Error::NonFiniteLoss { .. }
            | Error::DegeneratePair
            | Error::DegenerateAxis(_)
            | Error::ZeroVector
            | Error::ZeroReferenceLength => ErrorKind::Numerical,
            Error::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Error::DegeneratePair => "DegeneratePair",
            Error::ZeroVector => "ZeroVector",
            Error::NonFinite(_) => "NonFinite",
            Error::InvalidPolyline(_) => "InvalidPolyline",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::OddSpatialSize { .. } => "OddSpatialSize",
            Error::UnrecordedTensor => "UnrecordedTensor",
            Error::BadSize(_) => "BadSize",
            Error::EmptyDataset => "EmptyDataset",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::MissingMirrorTable => "MissingMirrorTable",
            Error::DegenerateAxis(_) => "DegenerateAxis",
            Error::SchemaMismatch(_) => "SchemaMismatch",
            Error::ZeroReferenceLength => "ZeroReferenceLength",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::TooFewSubjects { .. } => "TooFewSubjects",
            Error::GeometryOverflow(_) => "GeometryOverflow",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::Config(_) => "Config",
            Error::Format { .. } => "Format",
            Error::Io(_) => "IoError",
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
