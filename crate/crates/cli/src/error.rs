use std::fmt;
use std::path::Path;

use segkit::dataio::{DataError, ManifestError, PnmError};
use segkit::kv::KvError;
use segkit::metrics::MetricsError;
use segkit::segnet::{CheckpointError, SegError};

/// Process exit codes.
pub mod code {
    pub const OK: u8 = 0;
    pub const CHECK_FAILED: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const DIVERGENCE: u8 = 4;
    pub const MISSING_ROBOT: u8 = 5;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: code::USAGE, message: msg.into() }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self { code: code::IO, message: msg.into() }
    }

    pub fn check(msg: impl Into<String>) -> Self {
        Self { code: code::CHECK_FAILED, message: msg.into() }
    }

    pub fn at(path: &Path, e: impl fmt::Display) -> Self {
        Self::io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<KvError> for CliError {
    fn from(e: KvError) -> Self {
        Self::usage(format!("config: {e}"))
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::Io(io) => Self::io(format!("manifest: {io}")),
            other => Self::usage(format!("manifest: {other}")),
        }
    }
}

impl From<PnmError> for CliError {
    fn from(e: PnmError) -> Self {
        Self::io(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Manifest(m) => m.into(),
            DataError::Spec(s) => Self::usage(format!("synthetic spec: {s}")),
            DataError::SizeMismatch { .. } => Self::usage(e.to_string()),
            other => Self::io(other.to_string()),
        }
    }
}

impl From<SegError> for CliError {
    fn from(e: SegError) -> Self {
        match e {
            SegError::Divergence { .. } => Self { code: code::DIVERGENCE, message: e.to_string() },
            SegError::Metrics(m) => m.into(),
            other => Self::usage(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(m) => m.into(),
            other => Self::io(format!("checkpoint: {other}")),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::MissingRobot(_) => Self { code: code::MISSING_ROBOT, message: e.to_string() },
            other => Self::usage(other.to_string()),
        }
    }
}

impl From<segkit::csec::CsecError> for CliError {
    fn from(e: segkit::csec::CsecError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<segkit::denoise::DenoiseError> for CliError {
    fn from(e: segkit::denoise::DenoiseError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<segkit::gradcheck::SuiteError> for CliError {
    fn from(e: segkit::gradcheck::SuiteError) -> Self {
        use segkit::gradcheck::SuiteError;
        match e {
            SuiteError::Build { .. } => Self::check(e.to_string()),
            other => Self::usage(other.to_string()),
        }
    }
}
