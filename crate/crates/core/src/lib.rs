//! Stochastic-action model of quantum measurement.

pub mod appendix;
pub mod error;
pub mod experiment;
pub mod expr;
pub mod grid;
pub mod io;
pub mod madelung;
pub mod measurement;
pub mod observables;
pub mod operator;
pub mod physics;
pub mod propagate;
pub mod rng;
pub mod spectral;
pub mod stochastics;
pub mod stats;
pub mod system;
pub mod trajectory;
pub mod wavefunction;

pub use error::{Error, Result};
