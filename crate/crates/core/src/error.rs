use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A cross-parameter invariant (packet separation, timescale hierarchy, ...) does not hold.
    #[error("{invariant} violated: {detail}")]
    Configuration { invariant: &'static str, detail: String },

    #[error("domain overflow: {0}")]
    DomainOverflow(String),

    #[error("basis truncation residual {residual:.3e} exceeds the limit {limit:.1e}")]
    Truncation { residual: f64, limit: f64 },

    #[error("invalid system at {location}: {detail}")]
    InvalidSystem { location: String, detail: String },

    #[error("linear solve did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    SolverDivergence { iterations: usize, residual: f64 },

    #[error("evaluation at a node of the wavefunction (|psi|^2 = {density:.3e})")]
    Node { density: f64 },

    #[error("outcome window covers only {covered:.6} of the state weight")]
    Coverage { covered: f64 },

    #[error("expression error: {0}")]
    Expression(String),

    /// A single ensemble trial failed; carries its index so it can be replayed.
    #[error("trial {trial} (seed {seed}) failed: {source}")]
    Trial { trial: u64, seed: u64, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
