//! Univariate stepping-out slice sampler (Neal 2003), applied coordinate
//! by coordinate over a block.

use nalgebra::DVector;

use crate::{FluxError, Result};

/// Cap on interval expansions per side. Block widths default to a tenth of
/// each prior range, so twenty expansions cover twice the range; hitting
/// the cap means the target is flat out to infinity or broken.
const MAX_STEPOUT: usize = 20;

/// Cap on shrinkage iterations; shrinkage halves the interval in
/// expectation, so this many rejections indicates a broken target.
const MAX_SHRINK: usize = 200;

/// One full sweep of univariate stepping-out slice updates over the
/// coordinates of `current`. The returned point satisfies
/// `log_density(out) ≥ slice level` for the level drawn at its coordinate
/// update, which leaves the target invariant.
pub fn slice_sample_block<F, R>(
    log_density: F,
    current: &DVector<f64>,
    widths: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
    R: rand::Rng,
{
    if widths.len() != current.len() {
        return Err(FluxError::Dimension(format!(
            "{} widths for {} coordinates",
            widths.len(),
            current.len()
        )));
    }
    if widths.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(FluxError::Parameter("slice widths must be positive".into()));
    }
    let mut x = current.clone();
    let mut fx = log_density(&x)?;
    if !fx.is_finite() {
        return Err(FluxError::Sampler(format!(
            "slice sampler started at a point with log-density {fx}"
        )));
    }
    for i in 0..x.len() {
        let w = widths[i];
        let x0 = x[i];
        let level = fx + rng.gen_range(0.0f64..1.0).ln();

        // Stepping out.
        let mut lo = x0 - rng.gen_range(0.0..1.0) * w;
        let mut hi = lo + w;
        let eval_at = |xi: f64, x: &mut DVector<f64>| -> Result<f64> {
            x[i] = xi;
            log_density(x)
        };
        let mut expansions = 0;
        while eval_at(lo, &mut x)? > level {
            lo -= w;
            expansions += 1;
            if expansions > MAX_STEPOUT {
                return Err(FluxError::Sampler(format!(
                    "slice interval for coordinate {i} still open after {MAX_STEPOUT} \
                     expansions left of {x0} (level {level:.3})"
                )));
            }
        }
        expansions = 0;
        while eval_at(hi, &mut x)? > level {
            hi += w;
            expansions += 1;
            if expansions > MAX_STEPOUT {
                return Err(FluxError::Sampler(format!(
                    "slice interval for coordinate {i} still open after {MAX_STEPOUT} \
                     expansions right of {x0} (level {level:.3})"
                )));
            }
        }

        // Shrinkage.
        let mut accepted = false;
        for _ in 0..MAX_SHRINK {
            let candidate = rng.gen_range(lo..hi);
            let f_candidate = eval_at(candidate, &mut x)?;
            if f_candidate > level {
                debug_assert!(f_candidate >= level);
                fx = f_candidate;
                accepted = true;
                break;
            }
            if candidate < x0 {
                lo = candidate;
            } else {
                hi = candidate;
            }
        }
        if !accepted {
            return Err(FluxError::Sampler(format!(
                "slice shrinkage for coordinate {i} failed to accept within {MAX_SHRINK} \
                 iterations around {x0}"
            )));
        }
    }
    Ok(x)
}
