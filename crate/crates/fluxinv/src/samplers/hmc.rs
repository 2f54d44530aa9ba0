//! Hamiltonian Monte Carlo with leapfrog integration, identity mass, and
//! Robbins–Monro step-size adaptation during burn-in.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{FluxError, Result};

/// Adaptation pulls the acceptance probability toward this value, the
/// midpoint-weighted centre of the usual 30–80% working band.
pub const ADAPT_TARGET: f64 = 0.65;

/// Hamiltonian kernel configuration. The number of leapfrog steps is drawn
/// uniformly from `leapfrog_min..=leapfrog_max` each proposal to avoid
/// resonant trajectories.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_min: usize,
    pub leapfrog_max: usize,
    /// Iterations during which the step size adapts; frozen afterwards.
    pub adapt_window: usize,
    /// Acceptance band reported as healthy by diagnostics.
    pub accept_band: (f64, f64),
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            step_size: 0.1,
            leapfrog_min: 10,
            leapfrog_max: 25,
            adapt_window: 1000,
            accept_band: (0.3, 0.8),
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(FluxError::Parameter(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.leapfrog_min < 1 || self.leapfrog_max < self.leapfrog_min {
            return Err(FluxError::Parameter(format!(
                "leapfrog range ({}, {}) invalid",
                self.leapfrog_min, self.leapfrog_max
            )));
        }
        let (lo, hi) = self.accept_band;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(FluxError::Parameter(format!(
                "acceptance band ({lo}, {hi}) must satisfy 0 < lo < hi < 1"
            )));
        }
        Ok(())
    }
}

/// Result of one Hamiltonian proposal.
#[derive(Clone, Debug)]
pub struct HmcOutcome {
    pub accepted: bool,
    pub state: DVector<f64>,
    /// `min(1, exp(−ΔH))`; zero when the trajectory left the support.
    pub accept_prob: f64,
}

fn finite_grad(g: &DVector<f64>) -> bool {
    g.iter().all(|v| v.is_finite())
}

/// Run `steps` leapfrog steps from `(q, p)` with step size `eps`.
/// Returns `None` when the trajectory hits a point of zero density or an
/// unusable gradient (the caller rejects).
pub fn leapfrog<FL, FG>(
    log_density: &FL,
    grad: &FG,
    q0: &DVector<f64>,
    p0: &DVector<f64>,
    eps: f64,
    steps: usize,
) -> Result<Option<(DVector<f64>, DVector<f64>, f64)>>
where
    FL: Fn(&DVector<f64>) -> Result<f64>,
    FG: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut q = q0.clone();
    let mut p = p0.clone();
    let mut g = match grad(&q) {
        Ok(g) if finite_grad(&g) => g,
        _ => return Ok(None),
    };
    let mut logp = f64::NEG_INFINITY;
    for _ in 0..steps {
        p += &g * (0.5 * eps);
        q += &p * eps;
        logp = log_density(&q)?;
        if !logp.is_finite() {
            return Ok(None);
        }
        g = match grad(&q) {
            Ok(g) if finite_grad(&g) => g,
            Ok(_) => return Ok(None),
            Err(FluxError::Domain(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        p += &g * (0.5 * eps);
    }
    Ok(Some((q, p, logp)))
}

/// One Hamiltonian step from `current`: leapfrog with a step count drawn
/// from the configured range, Metropolis accept with `min(1, exp(−ΔH))`.
/// Zero density anywhere along the trajectory forces rejection; a
/// non-finite gradient at the current state is an error.
pub fn hmc_step<FL, FG, R>(
    log_density: &FL,
    grad: &FG,
    current: &DVector<f64>,
    cfg: &HmcConfig,
    rng: &mut R,
) -> Result<HmcOutcome>
where
    FL: Fn(&DVector<f64>) -> Result<f64>,
    FG: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    R: Rng,
{
    cfg.validate()?;
    let logp0 = log_density(current)?;
    if !logp0.is_finite() {
        return Err(FluxError::Sampler(format!(
            "HMC started at a point with log-density {logp0}"
        )));
    }
    let g0 = grad(current)?;
    if !finite_grad(&g0) {
        return Err(FluxError::Sampler(
            "non-finite gradient at the current state".into(),
        ));
    }
    let p0: DVector<f64> = DVector::from_fn(current.len(), |_, _| rng.sample(StandardNormal));
    let h0 = -logp0 + 0.5 * p0.norm_squared();
    let steps = rng.gen_range(cfg.leapfrog_min..=cfg.leapfrog_max);

    match leapfrog(log_density, grad, current, &p0, cfg.step_size, steps)? {
        None => Ok(HmcOutcome {
            accepted: false,
            state: current.clone(),
            accept_prob: 0.0,
        }),
        Some((q, p, logp)) => {
            let h1 = -logp + 0.5 * p.norm_squared();
            let accept_prob = (h0 - h1).exp().min(1.0);
            if rng.gen_range(0.0f64..1.0) < accept_prob {
                Ok(HmcOutcome {
                    accepted: true,
                    state: q,
                    accept_prob,
                })
            } else {
                Ok(HmcOutcome {
                    accepted: false,
                    state: current.clone(),
                    accept_prob,
                })
            }
        }
    }
}

/// Robbins–Monro update of the step size during the adaptation window:
/// `ln ε ← ln ε + η_t (acc − 0.65)` with `η_t = 0.5·t^{−0.6}`.
pub fn adapt_step_size(step_size: f64, accept_rate: f64, iteration: usize) -> f64 {
    let t = iteration.max(1) as f64;
    let eta = 0.5 * t.powf(-0.6);
    (step_size.ln() + eta * (accept_rate - ADAPT_TARGET)).exp()
}
