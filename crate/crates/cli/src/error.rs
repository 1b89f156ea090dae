//! Error type shared by every command, mapped onto the process exit codes.
//!
//! The mapping is part of the command-line contract: `1` for configuration
//! and usage mistakes, `2` for input/output and file-format problems, `3`
//! for numeric failures (non-finite values, unusable statistics).

use toothrec::assembly::AssemblyError;
use toothrec::checkpoint::CheckpointError;
use toothrec::conditioning::ConditioningError;
use toothrec::meshing::MeshingError;
use toothrec::metrics::MetricsError;
use toothrec::numerics::NumericsError;
use toothrec::occupancy::OccupancyError;
use toothrec::synth::SynthError;

/// One failure class per nonzero exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, bad config keys or values, impossible requests. Exit 1.
    #[error("{0}")]
    Usage(String),
    /// Missing, unreadable, unwritable, or corrupt files. Exit 2.
    #[error("{0}")]
    Io(String),
    /// The computation produced values it cannot stand behind. Exit 3.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Io(_) => 2,
            Self::Numeric(_) => 3,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::Usage(message.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Io(format!("json error: {e}"))
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<ConditioningError> for CliError {
    fn from(e: ConditioningError) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        Self::Numeric(e.to_string())
    }
}

impl From<AssemblyError> for CliError {
    fn from(e: AssemblyError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig { .. } | SynthError::DuplicateClass(_) => {
                Self::Usage(e.to_string())
            }
            _ => Self::Io(e.to_string()),
        }
    }
}

impl From<OccupancyError> for CliError {
    fn from(e: OccupancyError) -> Self {
        match e {
            OccupancyError::Numerics(inner) => Self::from(inner),
            OccupancyError::Conditioning(inner) => Self::from(inner),
            OccupancyError::InvalidConfig { .. }
            | OccupancyError::EmptyDataset
            | OccupancyError::EmptyValidation
            | OccupancyError::MissingCondition { .. } => Self::Usage(e.to_string()),
            _ => Self::Io(e.to_string()),
        }
    }
}

impl From<MeshingError> for CliError {
    fn from(e: MeshingError) -> Self {
        match e {
            MeshingError::BadDims { .. } | MeshingError::BadIso { .. } => {
                Self::Usage(e.to_string())
            }
            MeshingError::NonFinite { .. } => Self::Numeric(e.to_string()),
            MeshingError::Occupancy(inner) => Self::from(inner),
            MeshingError::Tensor(inner) => Self::from(inner),
            MeshingError::Io(inner) => Self::from(inner),
            _ => Self::Io(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::ZeroSampleCount
            | MetricsError::GridShape { .. }
            | MetricsError::DimMismatch { .. }
            | MetricsError::EmptyGroundTruth => Self::Usage(e.to_string()),
            MetricsError::Meshing(inner) => Self::from(inner),
            MetricsError::Occupancy(inner) => Self::from(inner),
            _ => Self::Numeric(e.to_string()),
        }
    }
}
