//! Mean-field Langevin training of relaxed-control neural ODEs.
//!
//! A network is a controlled ODE `dx/dt = E_{a ~ nu_t} phi(t, x, a, zeta)`
//! whose control `nu_t` is a probability measure over parameters. The
//! measure is represented by `N` particles on a uniform time grid and moved by
//! an overdamped Langevin dynamics whose drift is the gradient of the
//! data-averaged Hamiltonian, computed from one forward and one adjoint sweep.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod control;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod langevin;
pub mod model;
pub mod objective;
pub mod ode;
mod par;
pub mod rng;

pub use control::{ParamArray, ParticleCloud};
pub use dataset::{DataSample, DataValue, Dataset};
pub use error::{Error, Result};
pub use model::{GaussianPrior, Model, ModelKind};
pub use ode::TimeGrid;
