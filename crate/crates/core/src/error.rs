use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid volume: {0}")]
    Volume(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("voxel index ({i}, {j}, {k}) out of range for dims ({nx}, {ny}, {nz})")]
    IndexOutOfRange {
        i: usize,
        j: usize,
        k: usize,
        nx: usize,
        ny: usize,
        nz: usize,
    },

    #[error("invalid annotation: {0}")]
    Annotation(String),

    #[error("no ROI of class {0} in case {1}")]
    AbsentClass(u8, String),

    #[error("ground-truth mask is empty; its surface is undefined")]
    EmptySurface,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("statistics error: {0}")]
    Stats(String),
}

impl Error {
    /// Process exit code for the CLI: 2 configuration, 3 data, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. }
            | Error::Json { .. }
            | Error::Volume(_)
            | Error::Geometry(_)
            | Error::Annotation(_)
            | Error::AbsentClass(..)
            | Error::Data(_) => 3,
            _ => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
