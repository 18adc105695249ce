use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input record. `line` is 1-based and counts the header.
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("{0}")]
    Domain(String),

    #[error("{}duplicate edge {src} -> {dst}", at_line(.line))]
    DuplicateEdge {
        line: Option<u64>,
        src: String,
        dst: String,
    },

    #[error("{}self-loop on agent {agent}", at_line(.line))]
    SelfLoop { line: Option<u64>, agent: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn at_line(line: &Option<u64>) -> String {
    match line {
        Some(l) => format!("line {l}: "),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad input or configuration rather than by
    /// an I/O or internal failure.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Numerical(_))
    }
}
