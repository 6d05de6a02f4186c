use std::path::Path;

use merge_core::emkb::persist::PersistError;
use merge_core::emkb::EmkbError;
use merge_core::gateways::GatewayError;
use merge_core::ingest::IngestError;
use thiserror::Error;

/// Command failure, grouped by the exit status it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config values or argument combinations.
    #[error("{0}")]
    Usage(String),
    /// Unreadable or invalid input and output files.
    #[error("{0}")]
    Data(String),
    /// The model backend is unavailable or misbehaving.
    #[error("{0}")]
    Gateway(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Gateway(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        CliError::Data(format!("knowledge base: {e}"))
    }
}

impl From<EmkbError> for CliError {
    fn from(e: EmkbError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        CliError::Gateway(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
