//! Categorized command failures and their exit codes.

use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or arguments.
    Config(String),
    /// An artifact a command needs has not been produced yet.
    Missing { path: PathBuf, what: &'static str, command: &'static str },
    /// An artifact was produced under a different configuration.
    Stale { path: PathBuf, found: String, expected: String },
    /// A check the command runs did not pass.
    Check(String),
    Io { path: PathBuf, source: std::io::Error },
    Lib(treebeam::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Missing { .. } => 3,
            Failure::Stale { .. } => 4,
            Failure::Check(_) => 5,
            Failure::Io { .. } => 6,
            Failure::Lib(e) => match e {
                treebeam::Error::Config(_) | treebeam::Error::Level { .. } => 2,
                treebeam::Error::Io { .. } => 6,
                treebeam::Error::Diverged { .. } => 5,
                _ => 7,
            },
        }
    }

    pub fn category(&self) -> &'static str {
        match self.exit_code() {
            2 => "configuration error",
            3 => "missing prerequisite",
            4 => "stale artifact",
            5 => "check failed",
            6 => "i/o error",
            _ => "data error",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Failure::Io { path: path.into(), source }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::Check(m) => f.write_str(m),
            Failure::Missing { path, what, command } => write!(
                f,
                "{what} not found at {}; run `treebeam {command}` first",
                path.display()
            ),
            Failure::Stale { path, found, expected } => write!(
                f,
                "{} was built with config hash {found} but the current configuration gives {expected}; \
                 rebuild it or pass --force",
                path.display()
            ),
            Failure::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<treebeam::Error> for Failure {
    fn from(e: treebeam::Error) -> Self {
        Failure::Lib(e)
    }
}
