//! The two MCMC kernels on known targets: step-size adaptation pulling
//! the Hamiltonian acceptance rate into its working band, and the slice
//! sampler handling a bounded, correlated target without tuning.
//!
//! Run with: cargo run --example sampler_tuning

use fluxinv::samplers::{adapt_step_size, hmc_step, slice_sample_block, HmcConfig};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> fluxinv::Result<()> {
    // A 5-dimensional standard normal via Hamiltonian steps, starting
    // from a hopeless step size.
    let logp = |x: &DVector<f64>| -> fluxinv::Result<f64> { Ok(-0.5 * x.norm_squared()) };
    let grad = |x: &DVector<f64>| -> fluxinv::Result<DVector<f64>> { Ok(-x) };
    let mut cfg = HmcConfig {
        step_size: 5.0,
        leapfrog_min: 10,
        leapfrog_max: 25,
        adapt_window: 500,
        ..HmcConfig::default()
    };
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut x = DVector::zeros(5);
    let mut window = Vec::new();
    println!("Hamiltonian adaptation from step size 5.0:");
    for t in 1..=1500usize {
        let out = hmc_step(&logp, &grad, &x, &cfg, &mut rng)?;
        x = out.state;
        if t <= cfg.adapt_window {
            cfg.step_size = adapt_step_size(cfg.step_size, out.accept_prob, t);
        }
        window.push(out.accepted);
        if window.len() > 100 {
            window.remove(0);
        }
        if t % 250 == 0 {
            let rate = window.iter().filter(|&&a| a).count() as f64 / window.len() as f64;
            println!("  iteration {t:>5}: step size {:.4}, recent acceptance {rate:.2}", cfg.step_size);
        }
    }

    // A correlated banana-shaped target for the slice sampler.
    let banana = |v: &DVector<f64>| -> fluxinv::Result<f64> {
        let (a, b) = (v[0], v[1]);
        if !(-5.0..5.0).contains(&a) || !(-5.0..5.0).contains(&b) {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(-0.5 * (a * a + 4.0 * (b - a * a / 2.0).powi(2)))
    };
    let widths = DVector::from_element(2, 1.0);
    let mut v = DVector::zeros(2);
    let n = 20_000;
    let mut mean = DVector::zeros(2);
    for _ in 0..n {
        v = slice_sample_block(banana, &v, &widths, &mut rng)?;
        mean += &v;
    }
    mean /= n as f64;
    println!(
        "\nslice sampler on a bounded banana target: {n} sweeps, mean = ({:.3}, {:.3})",
        mean[0], mean[1]
    );
    Ok(())
}
