use std::fmt;
use std::io::ErrorKind;

/// Command failure, mapped to a distinct process exit code per category.
#[derive(Debug)]
pub enum CliError {
    /// Unknown subcommand or flag, or a malformed command line.
    Usage(String),
    /// A referenced input file or directory does not exist.
    MissingFile(String),
    /// The config file or a flag value cannot be parsed.
    Config(String),
    /// Anything that fails after the inputs were accepted.
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Run(_) => 1,
            CliError::Usage(_) => 2,
            CliError::MissingFile(_) => 3,
            CliError::Config(_) => 4,
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            CliError::Run(_) => "run",
            CliError::Usage(_) => "usage",
            CliError::MissingFile(_) => "missing-file",
            CliError::Config(_) => "config",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Run(m) | CliError::Usage(m) | CliError::MissingFile(m) | CliError::Config(m) => m,
        }
    }
}

/// `error[<category>]: <message>` on a single line.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat: Vec<&str> = self.message().split_whitespace().collect();
        write!(f, "error[{}]: {}", self.tag(), flat.join(" "))
    }
}

impl From<maskprior_core::Error> for CliError {
    fn from(e: maskprior_core::Error) -> Self {
        use maskprior_core::Error as E;
        match &e {
            E::Io { source, .. } if source.kind() == ErrorKind::NotFound => CliError::MissingFile(e.to_string()),
            E::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Run(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_line_and_codes() {
        let e = CliError::Config("bad\nvalue  here".into());
        assert_eq!(e.to_string(), "error[config]: bad value here");
        assert_eq!(e.exit_code(), 4);
        let missing = maskprior_core::Error::Io {
            path: "x".into(),
            source: std::io::Error::from(ErrorKind::NotFound),
        };
        assert_eq!(CliError::from(missing).exit_code(), 3);
        let other = maskprior_core::Error::Frozen;
        assert_eq!(CliError::from(other).exit_code(), 1);
    }
}
