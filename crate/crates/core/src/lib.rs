//! Simulation of multidimensional nonlinear spectroscopy on trapped-ion phonon
//! chains and long-range Ising spin chains.

pub mod error;
pub mod linalg;
pub mod liouville;
pub mod models;
pub mod pathways;
pub mod pulses;
pub mod spectra;
pub mod protocol;

pub use error::{Error, Result};
