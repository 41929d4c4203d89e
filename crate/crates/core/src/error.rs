use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("audio too short: {samples} samples, one frame needs {frame}")]
    AudioTooShort { samples: usize, frame: usize },

    #[error("utterance {0} has no speech frames")]
    NoSpeech(String),

    #[error("statistics were accumulated with a different UBM")]
    UbmMismatch,

    #[error("affine slot ({position}, {partition}) already present")]
    DuplicateSlot { position: usize, partition: String },

    #[error("invalid affine slot position {position} (valid 0..={max})")]
    InvalidSlot { position: usize, max: usize },

    #[error("missing affine slot ({position}, {partition})")]
    MissingSlot { position: usize, partition: String },

    #[error("archive has bad magic bytes")]
    BadMagic,

    #[error("unsupported format version {0}")]
    VersionMismatch(u32),

    #[error("truncated record")]
    Truncated,

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed manifest line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("dangling reference: utterance {id:?} not found in {}", .path.display())]
    DanglingReference { id: String, path: PathBuf },

    #[error("container checksum mismatch")]
    ChecksumMismatch,

    #[error("container holds a {found} model, expected {expected}")]
    KindMismatch { expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("codec: {0}")]
    Codec(#[from] bincode::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Wraps an error with the pipeline stage that produced it.
    pub fn at_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }

    /// Stable numeric code, shared with the C API.
    pub fn code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) => 1,
            Error::DimensionMismatch { .. } => 2,
            Error::NonFinite(_) => 3,
            Error::AudioTooShort { .. } => 4,
            Error::NoSpeech(_) => 5,
            Error::UbmMismatch => 6,
            Error::DuplicateSlot { .. } => 7,
            Error::InvalidSlot { .. } => 8,
            Error::MissingSlot { .. } => 9,
            Error::BadMagic => 10,
            Error::VersionMismatch(_) => 11,
            Error::Truncated => 12,
            Error::DuplicateId(_) => 13,
            Error::MissingFile(_) => 14,
            Error::MalformedLine { .. } => 15,
            Error::DanglingReference { .. } => 16,
            Error::ChecksumMismatch => 17,
            Error::KindMismatch { .. } => 18,
            Error::Config(_) => 19,
            Error::Stage { source, .. } => source.code(),
            Error::Wav(_) => 20,
            Error::Codec(_) => 21,
            Error::Io(_) => 22,
        }
    }
}
