//! Conditional Lagrangian Wasserstein Flow (CLWF) for time-series imputation.
//!
//! The pipeline treats imputation as conditional generation: random noise is
//! the source distribution, the missing values are the target distribution,
//! and the observed values are conditioning information. Mini-batches of
//! (noise, target) pairs are projected into the Wasserstein space by optimal
//! transport coupling, a velocity field is trained simulation-free by flow
//! matching on stochastic interpolants, and samples are drawn by Euler
//! integration of the learned ODE, optionally corrected by the gradient of a
//! VAE-backed potential (Rao-Blackwellized sampler) and averaged over
//! Monte-Carlo trajectories.

pub mod config;
pub mod data;
pub mod experiments;
pub mod interpolant;
pub mod model;
pub mod optim;
pub mod ot;
pub mod sampler;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vae;

mod checkpoint;

pub use tensor::Tensor;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor/matrix shape mismatch; names the operation and the shapes involved.
    Shape(String),
    /// Domain violation: invalid argument, non-finite value, empty mask, ...
    Domain(String),
    /// Configuration file / field problem.
    Config(String),
    /// Malformed dataset or checkpoint content.
    Data(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
