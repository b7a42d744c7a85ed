//! Crate-wide error type.
//!
//! Variants are grouped by what the caller can do about them: `Domain` for
//! arguments outside an operation's contract, `Parse` for malformed input
//! files, `Io` for filesystem trouble, and `Numeric` for iterative routines
//! that failed to converge or produced degenerate intermediate results.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's stated domain.
    #[error("domain: {0}")]
    Domain(String),

    /// A structured input file failed validation. `line` is 1-based; 0 means
    /// the error is not tied to a particular line.
    #[error("parse ({what}, line {line}): {msg}")]
    Parse {
        what: &'static str,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// An iterative or numerical procedure failed (non-convergence,
    /// degenerate system, underdetermined vote, ...).
    #[error("numeric: {0}")]
    Numeric(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn parse(what: &'static str, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            what,
            line,
            msg: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
