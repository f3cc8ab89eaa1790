use std::path::PathBuf;

use crate::volume::Dims;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("data length {len} does not match dims {dims:?}")]
    DataLength { len: usize, dims: Dims },

    #[error("dimensions must be positive, got {0:?}")]
    EmptyDims(Dims),

    #[error("voxel spacing must be strictly positive, got ({0}, {1}, {2})")]
    InvalidSpacing(f64, f64, f64),

    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimsMismatch(Dims, Dims),

    #[error("mask is not binary: found label {0}")]
    NotBinary(u32),

    #[error("unknown nucleus id {0}")]
    UnknownLabel(u32),

    #[error("probability value {0} outside [0, 1]")]
    ProbabilityRange(f32),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no detectable nuclei: none of {0} seeds lies in the foreground")]
    NoNuclei(usize),

    #[error("correlation table has no entry for supervoxel {0}")]
    MissingSupervoxel(u32),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("TIFF error in {path}: {source}")]
    Tiff {
        path: PathBuf,
        #[source]
        source: tiff::TiffError,
    },

    #[error("unsupported TIFF layout in {path}: {reason}")]
    UnsupportedTiff { path: PathBuf, reason: String },

    #[error("inconsistent page size in {path}: page {page} is {got:?}, expected {expected:?}")]
    PageSize {
        path: PathBuf,
        page: usize,
        got: (u32, u32),
        expected: (u32, u32),
    },

    #[error("sequence in {dir} is missing frame {index}")]
    MissingFrame { dir: PathBuf, index: usize },

    #[error("sequence in {0} has no frames")]
    EmptySequence(PathBuf),

    #[error("label {0} does not fit in 16 bits")]
    LabelOverflow(u32),

    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid synthetic script: {0}")]
    Script(String),

    #[error("inconsistent lineage: {0}")]
    Lineage(String),

    #[error("ground truth contains no nuclei")]
    EmptyTruth,

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse error class, used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Algorithm,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_frame(self, frame: usize) -> Self {
        Error::Frame {
            frame,
            source: Box::new(self),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Script(_) | Error::InvalidParameter(_) => {
                ErrorCategory::Config
            }
            Error::Io { .. }
            | Error::Tiff { .. }
            | Error::UnsupportedTiff { .. }
            | Error::PageSize { .. }
            | Error::MissingFrame { .. }
            | Error::EmptySequence(_)
            | Error::LabelOverflow(_)
            | Error::Parse { .. } => ErrorCategory::Io,
            Error::Frame { source, .. } => source.category(),
            _ => ErrorCategory::Algorithm,
        }
    }
}
