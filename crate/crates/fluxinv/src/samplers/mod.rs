//! MCMC kernels and the blocked Gibbs driver.
//!
//! Three kernels cover the three marginalized conditionals: a univariate
//! stepping-out slice sampler for the bounded parameter blocks, a
//! Hamiltonian kernel with leapfrog integration and burn-in step-size
//! adaptation for the flux field, and a Gibbs sweep that strings them
//! together over any number of independent chains.

mod gibbs;
mod hmc;
mod slice;

pub use gibbs::{
    initialize_chain, run_gibbs, ChainDiagnostics, ChainState, Draw, GibbsOptions, McmcSchedule,
    ParamDraw, PosteriorSamples,
};
pub use hmc::{adapt_step_size, hmc_step, leapfrog, HmcConfig, HmcOutcome};
pub use slice::slice_sample_block;
