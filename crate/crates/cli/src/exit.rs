use crome_core::train::CheckpointError;
use crome_core::CromeError;

pub const CONFIG: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERIC: u8 = 4;
pub const VERIFICATION: u8 = 5;
pub const INTERNAL: u8 = 1;

/// Errors raised by the driver itself.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Busy(String),
    Failed(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Busy(dir) => write!(f, "output directory {dir} is locked by another run"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CromeError>() {
            return match e {
                CromeError::Config(_) | CromeError::MissingPrerequisite { .. } => CONFIG,
                CromeError::Data(_)
                | CromeError::UnknownWord(_)
                | CromeError::Leakage(_)
                | CromeError::Checkpoint(_)
                | CromeError::Io { .. } => DATA,
                CromeError::NonFiniteLoss { .. } => NUMERIC,
                CromeError::Verification(_) => VERIFICATION,
                CromeError::Autodiff(_) | CromeError::Contract(_) => INTERNAL,
            };
        }
        if cause.downcast_ref::<CheckpointError>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return DATA;
        }
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) | CliError::Busy(_) => CONFIG,
                CliError::Failed(_) => VERIFICATION,
            };
        }
    }
    INTERNAL
}
