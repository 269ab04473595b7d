use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// What exactly is malformed in a volume file.
///
/// Each variant maps to one failure mode of the readers so callers (and
/// tests) can distinguish them without string matching.
#[derive(Debug, Clone, PartialEq)]
pub enum FormatErrorKind {
    /// Header magic does not identify a supported format.
    BadMagic,
    /// NIfTI datatype code outside the supported set {2, 4, 16}.
    UnsupportedDatatype(i16),
    /// Payload shorter than the header-declared grid requires.
    TruncatedPayload { expected_bytes: u64, got_bytes: u64 },
    /// A per-axis voxel dimension is zero, negative, or non-finite.
    NonPositiveVoxelDim { axis: usize, value: f64 },
    /// Decoded payload contains NaN or infinite values.
    NonFiniteData,
    /// Any other structural problem in the header.
    BadHeader(String),
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatErrorKind::BadMagic => write!(f, "bad magic: not a supported volume format"),
            FormatErrorKind::UnsupportedDatatype(code) => {
                write!(f, "unsupported datatype code {code} (supported: 2, 4, 16)")
            }
            FormatErrorKind::TruncatedPayload {
                expected_bytes,
                got_bytes,
            } => write!(
                f,
                "truncated payload: expected {expected_bytes} bytes, got {got_bytes}"
            ),
            FormatErrorKind::NonPositiveVoxelDim { axis, value } => {
                write!(f, "non-positive voxel dimension on axis {axis}: {value}")
            }
            FormatErrorKind::NonFiniteData => write!(f, "payload contains NaN or infinite values"),
            FormatErrorKind::BadHeader(msg) => write!(f, "bad header: {msg}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two grids that must be algebra-compatible are not. Names both.
    #[error("geometry mismatch: left is {left}, right is {right}")]
    GeometryMismatch { left: String, right: String },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("{path}: {kind}")]
    Format { path: PathBuf, kind: FormatErrorKind },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, kind: FormatErrorKind) -> Self {
        Error::Format {
            path: path.into(),
            kind,
        }
    }

    /// Process exit code for the CLI: distinct codes per failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Ingest(_) => 3,
            Error::Eval(_) => 4,
            _ => 1,
        }
    }
}
