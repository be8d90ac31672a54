use thiserror::Error;

use crate::attention::AttentionError;
use crate::metrics::MetricsError;
use crate::mock::MockError;
use crate::perturb::PerturbError;
use crate::prompt::PromptError;
use crate::report::ReportError;
use crate::store::StoreError;
use crate::table::TableError;

/// Any pipeline failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Mock(#[from] MockError),
    #[error("{0}")]
    Validation(String),
}

impl Error {
    /// True for filesystem failures, as opposed to bad input.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Table(e) => e.is_io(),
            Error::Store(e) => e.is_io(),
            Error::Report(e) => e.is_io(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
