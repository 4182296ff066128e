use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt header in {}: {reason}", path.display())]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("missing pyramid metadata file {}", .0.display())]
    MissingPyramidMeta(PathBuf),

    #[error("invalid level index {level} (slide has {count} levels)")]
    InvalidLevel { level: usize, count: usize },

    #[error("empty region ({w}x{h})")]
    EmptyRegion { w: u32, h: u32 },

    #[error("region {x},{y} {w}x{h} out of bounds for level of size {width}x{height}")]
    OutOfBounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },

    #[error("empty image")]
    EmptyImage,

    #[error("patch footprint lies outside the tissue mask")]
    FootprintOutsideMask,

    #[error("non-square image {width}x{height}")]
    NonSquare { width: u32, height: u32 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("key-count mismatch: header says {header} rows, key block has {keys}")]
    KeyCountMismatch { header: u64, keys: usize },

    #[error("missing slide {0}")]
    MissingSlide(String),

    #[error("missing label for slide {0}")]
    MissingLabel(String),

    #[error("slide {slide}: missing key {key}")]
    MissingKey { slide: String, key: String },

    #[error("dim mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{0}")]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
