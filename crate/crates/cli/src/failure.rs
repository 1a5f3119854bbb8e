//! Error categories and their process exit codes.

use std::fmt;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Solver(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Solver(_) => 3,
            Failure::Io(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Solver(m) => write!(f, "solver error: {m}"),
            Failure::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl From<lopa_core::Error> for Failure {
    fn from(e: lopa_core::Error) -> Self {
        use lopa_core::Error as E;
        match e {
            E::Config(_) | E::Domain(_) | E::Index(_) | E::Degenerate(_) | E::Weights(_) => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Solver(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}
