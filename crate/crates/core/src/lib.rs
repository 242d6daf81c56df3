//! Reaction-diffusion through a thin layer of periodic channels: a
//! finite-volume solver for the ε-problem, the limit interface model with
//! one cell problem per interface node, and two-scale error diagnostics
//! connecting the two.

pub mod geometry;
pub mod grid;
pub mod harness;
pub mod kinetics;
pub mod linsolve;
pub mod macrosim;
pub mod microsim;
pub mod twoscale;

use thiserror::Error;

/// Top-level failure, split by exit status.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Bad input: schema, alignment, parameters. Exit status 1.
    #[error("{0}")]
    Validation(String),
    /// Solver breakdown, non-finite values, inconsistent stored data. Exit status 2.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 1,
            Error::Numerical(_) | Error::Io(_) => 2,
        }
    }

    /// Prefixes the message, keeping the kind.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            Error::Validation(m) => Error::Validation(format!("{what}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{what}: {m}")),
            Error::Io(m) => Error::Io(format!("{what}: {m}")),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<geometry::GeometryError> for Error {
    fn from(e: geometry::GeometryError) -> Self {
        Error::Validation(e.to_string())
    }
}

impl From<grid::GridError> for Error {
    fn from(e: grid::GridError) -> Self {
        match e {
            grid::GridError::Misaligned(_) | grid::GridError::ZeroRefinement => Error::Validation(e.to_string()),
            _ => Error::Numerical(e.to_string()),
        }
    }
}

impl From<microsim::MicroError> for Error {
    fn from(e: microsim::MicroError) -> Self {
        match e {
            microsim::MicroError::Grid(g) => g.into(),
            microsim::MicroError::Coercivity(_)
            | microsim::MicroError::Stability { .. }
            | microsim::MicroError::Time(_) => Error::Validation(e.to_string()),
            _ => Error::Numerical(e.to_string()),
        }
    }
}

impl From<macrosim::MacroError> for Error {
    fn from(e: macrosim::MacroError) -> Self {
        match e {
            macrosim::MacroError::Grid(g) => g.into(),
            macrosim::MacroError::Micro(m) => m.into(),
            macrosim::MacroError::Layout(_) => Error::Validation(e.to_string()),
            _ => Error::Numerical(e.to_string()),
        }
    }
}

impl From<twoscale::TwoScaleError> for Error {
    fn from(e: twoscale::TwoScaleError) -> Self {
        match e {
            twoscale::TwoScaleError::Grid(g) => g.into(),
            twoscale::TwoScaleError::Refinement(_) | twoscale::TwoScaleError::Shift(_) => {
                Error::Validation(e.to_string())
            }
            twoscale::TwoScaleError::Snapshots(_) => Error::Numerical(e.to_string()),
        }
    }
}
