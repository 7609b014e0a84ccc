use std::fmt;

use songcraft::Error;

/// Failure classes, one per exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Ran correctly but the outcome is a failure (exit 1).
    Operational(String),
    /// Bad flags, values or config (exit 2).
    Usage(String),
    /// Unreadable, unwritable or malformed files (exit 3).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Operational(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Operational(_) => "operational",
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Operational(m) | CliError::Usage(m) | CliError::Io(m) => m,
        }
    }
}

/// `error[<kind>]: <message>`, always on one line.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.message().replace(['\n', '\r'], " ");
        write!(f, "error[{}]: {msg}", self.kind())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::MissingFile(_)
            | Error::UnsupportedEncoding { .. }
            | Error::UnsupportedChannels(_)
            | Error::MalformedWav(_)
            | Error::Io(_)
            | Error::Parse { .. }
            | Error::ModelVersion(_)
            | Error::CorruptedModel(_) => CliError::Io(msg),
            Error::OutOfRange(_)
            | Error::InvalidConfig(_)
            | Error::OutOfVocabulary(_)
            | Error::EmptyCommand
            | Error::EmptyTarget
            | Error::EmptySampleSet => CliError::Usage(msg),
            _ => CliError::Operational(msg),
        }
    }
}
