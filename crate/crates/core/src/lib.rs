#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Stochastic maximum principle toolkit for spectrally truncated controlled
//! evolution equations: forward simulation, first- and second-order adjoint
//! solvers, duality identity checks, and necessary-condition diagnostics.

pub mod adjoint;
pub mod cli;
pub mod error;
pub mod forward;
pub mod maximum_principle;
pub mod process;
pub mod report;
pub mod scenarios;
pub mod second_order;
pub mod spectral;
pub mod stats;
pub mod transposition;

pub use error::{Error, Result};
pub use forward::{
    BrownianEnsemble, Coefficients, ControlProcess, ControlSet, CostEstimate, Scenario, StateEnsemble, TimeGrid,
};
pub use process::{MatrixProcess, VectorProcess};
pub use spectral::{OperatorSpec, SpectralVector};
