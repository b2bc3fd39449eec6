use thiserror::Error;

/// Errors produced anywhere in the codec.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("coordinate {0:?} does not fit the configured range")]
    CoordOutOfRange([i64; 3]),
    #[error("reference point set is empty")]
    EmptyReference,
    #[error("duplicate coordinate {0:?}")]
    DuplicatePoints([u32; 3]),
    #[error("requested {requested} children but only {available} candidates exist")]
    InsufficientCandidates { requested: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("adjacency does not match frame: {0}")]
    AdjacencyMismatch(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("scan order mismatch: {0}")]
    ScanOrderError(String),
    #[error("decode error at byte {offset}: {reason}")]
    DecodeError { offset: usize, reason: String },
    #[error("frame {frame}: {source}")]
    Frame {
        frame: u32,
        #[source]
        source: Box<Error>,
    },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static [u8] },
    #[error("unsupported version {found} (this build reads version {supported})")]
    VersionMismatch { found: u8, supported: u8 },
    #[error(
        "{what} hash mismatch: stream has {stream:#018x}, loaded model has {loaded:#018x}; \
         decode with the weights file the stream was encoded with"
    )]
    HashMismatch {
        what: &'static str,
        stream: u64,
        loaded: u64,
    },
    #[error("scheduling error: {0}")]
    SchedulingError(String),
    #[error("invalid GOF size {0}: must be a power of two in 2..=128")]
    InvalidGofSize(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("rate-distortion curves do not overlap in quality")]
    NoOverlap,
    #[error("training diverged at step {0}")]
    TrainingDiverged(usize),
    #[error("value {0} outside the codable range")]
    ValueOutOfRange(i64),
    #[error("ply: {0}")]
    Ply(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn decode(offset: usize, reason: impl Into<String>) -> Self {
        Error::DecodeError {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn in_frame(self, frame: u32) -> Self {
        Error::Frame {
            frame,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
