//! Command implementations behind the `csdn` binary.

pub mod commands;
pub mod config;
pub mod overlay;

use std::fmt;

pub use config::RunConfig;

/// Process exit status of a failed command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError { kind: ExitKind::Usage, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError { kind: ExitKind::Data, msg: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CliError { kind: ExitKind::Numeric, msg: msg.into() }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Keep the reason on one line.
        f.write_str(&self.msg.replace('\n', " "))
    }
}

impl From<csdn::Error> for CliError {
    fn from(e: csdn::Error) -> Self {
        use csdn::Error as E;
        let kind = match &e {
            E::InvalidArgument(_) | E::Config { .. } => ExitKind::Usage,
            E::NonFinite { .. } | E::NonFiniteLoss { .. } | E::NonDeterministic { .. } => ExitKind::Numeric,
            _ => ExitKind::Data,
        };
        CliError { kind, msg: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
