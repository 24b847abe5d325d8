//! Command implementations behind the `occufield` binary.

pub mod commands;
pub mod config;
pub mod fit;
pub mod verify;

use occufield::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

/// Process exit code for an error escaping a command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::NonFinite { .. }
            | Error::Numeric { .. }
            | Error::DegenerateGradient { .. }
            | Error::NegativeDensity(_)
            | Error::UndefinedConcentration(_)
            | Error::UndefinedDepth
            | Error::TapeState(_),
        ) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}
