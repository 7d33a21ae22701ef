use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HolaError>;

/// Pipeline stage that surfaced an error during `run_pipeline`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    LoraMerge,
    Calibration,
    Quantize,
    Routing,
    Decode,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Load => "load",
            Stage::LoraMerge => "lora-merge",
            Stage::Calibration => "calibration",
            Stage::Quantize => "quantize",
            Stage::Routing => "routing",
            Stage::Decode => "decode",
            Stage::Report => "report",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum HolaError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported file version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("shape audit failed: {0}")]
    ShapeAudit(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<HolaError>,
    },
}

/// Coarse error classes, used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Capacity,
}

impl HolaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HolaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at(self, stage: Stage) -> Self {
        match self {
            already @ HolaError::Stage { .. } => already,
            other => HolaError::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &HolaError {
        match self {
            HolaError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self.root() {
            HolaError::Config(_) => ErrorClass::Config,
            HolaError::Capacity(_) => ErrorClass::Capacity,
            _ => ErrorClass::Data,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
