use thiserror::Error;

use crate::allocation::AllocationError;
use crate::compression::CompressionError;
use crate::metrics::MetricsError;
use crate::spectral::SpectralError;
use crate::synthlab::SynthError;
use crate::tensorio::{CheckpointError, GroupingError};

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl Error {
    /// The budget could not be met, as opposed to bad input or bad data.
    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::Allocation(AllocationError::Infeasible(_)))
            || matches!(self, Error::Synth(SynthError::Allocation(AllocationError::Infeasible(_))))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
