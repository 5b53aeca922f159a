use thiserror::Error;

/// Errors produced by estimation, simulation and I/O routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate {value} on axis {axis} outside bounds [{min}, {max}]")]
    Domain {
        axis: usize,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("site {index} is outside the domain: {source}")]
    SiteDomain {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("variogram fit failed: {0}")]
    Fit(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("gauge normalization failed: {0}")]
    Gauge(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("estimation failed at outer iteration {iteration}: {source}")]
    Estimation {
        iteration: usize,
        #[source]
        source: Box<Error>,
        best: Option<Box<crate::estimation::DeformModel>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_site(self, index: usize) -> Self {
        Error::SiteDomain {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::SiteDomain { source, .. }
            | Error::AtIteration { source, .. }
            | Error::Estimation { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Infeasible(_) => 4,
            Error::Numerical(_) | Error::Degenerate(_) | Error::Fit(_) | Error::Gauge(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
