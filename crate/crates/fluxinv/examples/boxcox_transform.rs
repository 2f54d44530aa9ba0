//! The Box–Cox transformation family: forward and inverse maps, the
//! truncation region, and the derivatives the Hamiltonian sampler uses.
//!
//! Run with: cargo run --example boxcox_transform

use fluxinv::boxcox::{self, BoxCoxParam};

fn main() -> fluxinv::Result<()> {
    println!("g_lambda(y) for a few fluxes and transformation parameters:\n");
    println!("{:>8} {:>10} {:>10} {:>10} {:>10}", "y", "lam=-0.5", "lam=0", "lam=0.5", "lam=1");
    for y in [0.1, 0.5, 1.0, 2.0, 10.0] {
        let row: Vec<f64> = [-0.5, 0.0, 0.5, 1.0]
            .iter()
            .map(|&l| boxcox::forward(y, BoxCoxParam::new(l).unwrap()).unwrap())
            .collect();
        println!(
            "{:>8.2} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            y, row[0], row[1], row[2], row[3]
        );
    }

    let lambda = BoxCoxParam::new(0.5)?;
    let g = boxcox::forward(4.0, lambda)?;
    let back = boxcox::inverse(g, lambda)?;
    println!("\nround trip at lambda = 0.5: 4.0 -> {g} -> {back}");

    // The image of g_lambda is bounded below for positive lambda; values
    // outside it are truncation violations.
    println!(
        "truncation check at lambda = 0.5: g = 0 ok? {}, g = -3 ok? {}",
        boxcox::truncation_ok(&[0.0], lambda),
        boxcox::truncation_ok(&[-3.0], lambda),
    );
    match boxcox::inverse(-3.0, lambda) {
        Err(e) => println!("inverse(-3.0) correctly fails: {e}"),
        Ok(v) => println!("unexpected inverse value {v}"),
    }

    // First and second derivatives drive the flux gradient.
    let (d1, d2) = boxcox::derivatives(2.0, lambda)?;
    println!("\nderivatives of g at y = 2, lambda = 0.5: g' = {d1:.6}, g'' = {d2:.6}");

    // The log branch engages smoothly for tiny lambda.
    let tiny = BoxCoxParam::new(1e-12)?;
    println!(
        "log-branch check: forward(e, 1e-12) = {:.12} (ln e = 1)",
        boxcox::forward(std::f64::consts::E, tiny)?
    );
    Ok(())
}
