//! The Box–Cox transformation family.
//!
//! `g_λ(y) = (y^λ − 1)/λ` for `λ ≠ 0` and `ln y` at `λ = 0`, applied
//! element-wise to positive flux values. The flux-process density needs the
//! transform, its log-Jacobian, and the truncation indicator; the
//! Hamiltonian sampler additionally needs the first two derivatives of
//! `g_λ` at each point.

use crate::{FluxError, Result};

/// Below this magnitude, `λ` is treated as exactly zero (the log branch).
/// Evaluating `(y^λ − 1)/λ` directly at tiny `λ` loses all significant
/// digits to cancellation; the log branch is the analytic limit.
pub const LAMBDA_EPS: f64 = 1e-8;

/// Transformation parameter `λ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoxParam {
    lambda: f64,
}

impl BoxCoxParam {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(FluxError::Parameter(format!(
                "Box-Cox lambda must be finite, got {lambda}"
            )));
        }
        Ok(BoxCoxParam { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// True when `|λ| < LAMBDA_EPS` and the log branch applies.
    pub fn is_log_branch(&self) -> bool {
        self.lambda.abs() < LAMBDA_EPS
    }
}

/// `g_λ(y)`, strictly increasing in `y` for every `λ`.
///
/// Computed as `expm1(λ ln y)/λ` off the log branch, which stays accurate
/// for small `λ·ln y`.
pub fn forward(y: f64, lambda: BoxCoxParam) -> Result<f64> {
    if !(y > 0.0) {
        return Err(FluxError::Domain(format!(
            "Box-Cox forward requires y > 0, got {y}"
        )));
    }
    let ln_y = y.ln();
    if lambda.is_log_branch() {
        Ok(ln_y)
    } else {
        Ok((lambda.lambda * ln_y).exp_m1() / lambda.lambda)
    }
}

/// Element-wise [`forward`].
pub fn forward_all(ys: &[f64], lambda: BoxCoxParam) -> Result<Vec<f64>> {
    ys.iter().map(|&y| forward(y, lambda)).collect()
}

/// `g_λ^{-1}(g) = (λg + 1)^{1/λ}`, defined only on the image of `g_λ`.
///
/// The image is `g > −1/λ` for `λ > 0` and `g < −1/λ` for `λ < 0`; a value
/// outside it signals a truncation-region violation.
pub fn inverse(g: f64, lambda: BoxCoxParam) -> Result<f64> {
    if !g.is_finite() {
        return Err(FluxError::Domain(format!(
            "Box-Cox inverse requires finite input, got {g}"
        )));
    }
    if lambda.is_log_branch() {
        return Ok(g.exp());
    }
    let arg = lambda.lambda * g;
    if arg <= -1.0 {
        return Err(FluxError::Domain(format!(
            "value {g} outside the image of g_lambda for lambda = {}",
            lambda.lambda
        )));
    }
    Ok((arg.ln_1p() / lambda.lambda).exp())
}

/// Element-wise [`inverse`].
pub fn inverse_all(gs: &[f64], lambda: BoxCoxParam) -> Result<Vec<f64>> {
    gs.iter().map(|&g| inverse(g, lambda)).collect()
}

/// Log of the transformation Jacobian, `Σ_i (λ − 1) ln y_i`.
pub fn log_jacobian(ys: &[f64], lambda: BoxCoxParam) -> Result<f64> {
    let mut sum_ln = 0.0;
    for &y in ys {
        if !(y > 0.0) {
            return Err(FluxError::Domain(format!(
                "Box-Cox Jacobian requires y > 0, got {y}"
            )));
        }
        sum_ln += y.ln();
    }
    Ok((lambda.lambda() - 1.0) * sum_ln)
}

/// First and second derivative of `g_λ` at `y`: `(y^{λ−1}, (λ−1) y^{λ−2})`.
///
/// The same expressions hold on the log branch (`1/y`, `−1/y²`), so there is
/// no branch switch to smooth over.
pub fn derivatives(y: f64, lambda: BoxCoxParam) -> Result<(f64, f64)> {
    if !(y > 0.0) {
        return Err(FluxError::Domain(format!(
            "Box-Cox derivatives require y > 0, got {y}"
        )));
    }
    let l = lambda.lambda();
    Ok((y.powf(l - 1.0), (l - 1.0) * y.powf(l - 2.0)))
}

/// Truncation indicator `T_λ`: true iff every element of `gs` lies in the
/// image of `g_λ`. Always true on the log branch.
pub fn truncation_ok(gs: &[f64], lambda: BoxCoxParam) -> bool {
    let l = lambda.lambda();
    if l >= LAMBDA_EPS {
        let bound = -1.0 / l;
        gs.iter().all(|&g| g > bound)
    } else if l <= -LAMBDA_EPS {
        let bound = -1.0 / l;
        gs.iter().all(|&g| g < bound)
    } else {
        true
    }
}
