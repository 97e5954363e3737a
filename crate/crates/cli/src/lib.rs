//! Command-line front-end: corpus generation, training, decoding, scoring,
//! attention export and checkpoint averaging.

pub mod commands;
pub mod config;

use stbd_core::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

/// Maps an error chain to its exit code: configuration and usage problems
/// give 1, bad or missing files 2, numerical failures 3.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Usage(_) | Error::Config(_) => exit::USAGE,
                Error::Numeric { .. } => exit::NUMERIC,
                _ => exit::DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return exit::DATA;
        }
    }
    exit::USAGE
}
