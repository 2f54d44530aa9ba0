//! Bayesian trace-gas flux inversion at regional scale.
//!
//! The library infers a positive spatial flux field from mole-fraction
//! readings taken at a handful of ground stations, linked to the flux by
//! time-varying sensitivity (footprint) matrices. The flux field is modelled
//! as a Box–Cox spatial process, the transport discrepancy as a separable
//! Gaussian space-time field, and a bottom-up inventory is assimilated as an
//! independent realisation of the flux process so that it informs the
//! process parameters rather than the field itself.
//!
//! Module map:
//!
//! - [`boxcox`] — the Box–Cox transformation family, its inverse, Jacobian,
//!   derivatives, and truncation indicator.
//! - [`covariance`] — spatial correlation builders, the AR(1) temporal
//!   precision, and the separable space-time precision with structured
//!   solves.
//! - [`cumulants`] — auto- and cross-cumulant functions of the bivariate
//!   (flux, mole-fraction) process, with a 1-D demonstration kernel.
//! - [`model`] — the hierarchical data bundle and the three marginalized
//!   conditional log-densities (with analytic flux gradient) that drive the
//!   sampler.
//! - [`samplers`] — slice and Hamiltonian kernels plus the blocked Gibbs
//!   driver with multi-chain management.
//! - [`osse`] — observing-system-simulation-experiment harness: synthetic
//!   sensitivities, forward simulation, reconstruction, and scoring.
//! - [`formats`] — CSV schemas for grids, sensitivities, observations,
//!   inventories, masks, and posterior samples.
//! - [`config`] / [`run`] — run configuration and the command entry points
//!   used by the `fluxinv` binary.
//!
//! See the crate `examples/` directory for one runnable example per major
//! capability.

pub mod boxcox;
pub mod config;
pub mod covariance;
pub mod cumulants;
mod error;
pub mod formats;
pub mod model;
pub mod osse;
pub mod run;
pub mod samplers;

pub use error::{FluxError, Result};
