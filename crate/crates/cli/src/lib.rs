//! Command implementations behind the `fpad` binary.

pub mod commands;
pub mod config;

use fpad_core::Error;

/// Process exit code for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidParams(_) => 2,
        Error::NonFiniteLoss { .. } | Error::Domain(_) => 4,
        Error::Io { .. }
        | Error::Layout(_)
        | Error::Decode { .. }
        | Error::EmptyImage
        | Error::TooSmall { .. }
        | Error::ManifestMismatch(_)
        | Error::ShapeMismatch(_)
        | Error::Mode(_)
        | Error::EmptyValSet
        | Error::InsufficientData(_)
        | Error::MissingClass(_) => 3,
    }
}
