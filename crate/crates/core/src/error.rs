use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no foreground component survived keying")]
    EmptyForeground,
    #[error("format error: {0}")]
    Format(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("time {t} outside track range [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("sampling strategy unavailable: {0}")]
    StrategyUnavailable(String),
    #[error("generation failed: {0}")]
    GenerationFailure(String),
    #[error("transform produces an empty raster ({width}x{height} at scale {scale})")]
    DegenerateTransform { width: u32, height: u32, scale: f64 },
    #[error("blend region touches the background border")]
    RegionOutOfBounds,
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("class `{class}` has {available} instances, {required} required")]
    Infeasible {
        class: String,
        available: usize,
        required: usize,
    },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Process exit codes used by the command-line tool.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const EMPTY: i32 = 4;
    pub const DEGENERATE: i32 = 5;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            InvalidInput(_) | Config(_) => exit::CONFIG,
            Io { .. } | Image { .. } | Json(_) | Format(_) | Integrity(_) | NotFound(_) => exit::IO,
            EmptyForeground
            | InsufficientData(_)
            | Infeasible { .. }
            | StrategyUnavailable(_)
            | GenerationFailure(_) => exit::EMPTY,
            OutOfRange { .. }
            | DegenerateSignal(_)
            | DegenerateGeometry(_)
            | DegenerateTransform { .. }
            | RegionOutOfBounds
            | Capacity(_)
            | UndefinedMetric(_) => exit::DEGENERATE,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            other => Error::Image {
                path: path.into(),
                source: other,
            },
        }
    }
}
