use std::path::PathBuf;
use std::process::ExitCode;

use scorefusion::Error;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Missing(PathBuf),
    Conflict(String),
    Run(Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Conflict(_) => 4,
            CliError::Run(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 3,
            CliError::Run(Error::Config(_)) => 4,
            CliError::Run(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self.code() {
            2 => "usage",
            3 => "missing-file",
            4 => "conflict",
            _ => "runtime",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.trim_start_matches("error: ").to_string(),
            CliError::Missing(p) => format!("no such file: {}", p.display()),
            CliError::Conflict(m) => m.clone(),
            CliError::Run(e) => e.to_string(),
        }
    }

    pub fn report(&self) -> ExitCode {
        let msg = self.message();
        let flat: Vec<&str> = msg
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more information"))
            .collect::<Vec<_>>();
        eprintln!("error[{}]: {}", self.kind(), flat.join(" "));
        ExitCode::from(self.code())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}
