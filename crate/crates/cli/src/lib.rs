//! Command-line front end for the `msop` library.

pub mod commands;
pub mod config;

use msop::Error;

/// Process exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Argument(_) => 1,
        Error::Io { .. } | Error::Image { .. } | Error::Parse { .. } | Error::Version(_) => 2,
        Error::Shape(_) | Error::Invariant(_) => 3,
    }
}
