//! End-to-end desk-scale inversion through the library API: simulate a
//! skewed truth field, observe it through synthetic footprints, run the
//! blocked Gibbs sampler, and score the posterior.
//!
//! Run with: cargo run --release --example synthetic_inversion

use fluxinv::boxcox::BoxCoxParam;
use fluxinv::covariance::{DiscrepancyParams, FluxCorrParams};
use fluxinv::model::{
    FluxCorrStructure, HierarchicalModel, ModelVariant, ObservationSet, PriorBounds, SpatialGrid,
    StationSet,
};
use fluxinv::osse::{
    aggregate_flux, posterior_molefraction, score_mcrps, score_rmspe, simulate_boxcox_field,
    simulate_observations, synth_sensitivities, BoxCoxFieldSpec, FluxUnit, Missingness,
    PlumeParams, RegionMask,
};
use fluxinv::samplers::{run_gibbs, GibbsOptions, HmcConfig, McmcSchedule};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> fluxinv::Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(20240801);

    // A 6 x 4 grid over a small lon-lat window, intercept-only design.
    let (nx, ny) = (6usize, 4usize);
    let n1 = nx * ny;
    let grid = SpatialGrid::new(
        (0..n1).map(|i| format!("c{i:02}")).collect(),
        (0..n1)
            .map(|i| [(i % nx) as f64 * 0.7 - 2.0, (i / nx) as f64 * 0.5 + 51.0])
            .collect(),
        DVector::from_element(n1, 1.0),
        DMatrix::from_element(n1, 1, 1.0),
    )?;
    let station_coords = [[-1.4, 51.2], [0.8, 51.7], [-0.2, 52.4]];
    let stations = StationSet::new(
        vec!["west".into(), "east".into(), "north".into()],
        station_coords.to_vec(),
    )?;

    // Lognormal truth and an independent inventory realisation.
    let spec = BoxCoxFieldSpec {
        corr: FluxCorrStructure::PoweredExp(FluxCorrParams::new(0.8, 1.5)?),
        tau1: 1.0,
        beta: DVector::from_element(1, 0.0),
        lambda: BoxCoxParam::new(0.0)?,
    };
    let truth = simulate_boxcox_field(&grid, &spec, &mut rng)?;
    let inventory = simulate_boxcox_field(&grid, &spec, &mut rng)?;

    let n_time = 150;
    let plume = PlumeParams {
        reference_flux: truth.sum() / n1 as f64,
        target_signal: 30.0,
        footprint_width: 0.8,
        wind_persistence: 0.95,
    };
    let stack = synth_sensitivities(&grid, &station_coords, n_time, &plume, &mut rng)?;
    let disc_truth = DiscrepancyParams::new(0.02, 0.9, 2.5)?;
    let (obs, _y2_true) = simulate_observations(
        &truth,
        &stack,
        &station_coords,
        &disc_truth,
        1.0,
        &Missingness::Fraction(0.1),
        &mut rng,
    )?;
    println!(
        "simulated {} observations over {} slots ({} held out)",
        obs.n_obs(),
        n_time * stations.len(),
        n_time * stations.len() - obs.n_obs()
    );

    let held_out: Vec<(usize, usize)> = (0..n_time)
        .flat_map(|t| (0..stations.len()).map(move |s| (t, s)))
        .filter(|&(t, s)| !obs.is_observed(t, s))
        .collect();
    let obs_for_model: ObservationSet = obs;
    let model = HierarchicalModel::new(
        grid,
        stations,
        stack,
        obs_for_model,
        inventory,
        PriorBounds::default(),
    )?;

    // Fit the full model: free transformation, spatial correlation.
    let opts = GibbsOptions {
        schedule: McmcSchedule {
            n_chains: 2,
            n_iter: 1500,
            burn_in: 600,
            thin: 3,
        },
        variant: ModelVariant::from_id(1)?,
        hmc: HmcConfig {
            step_size: 0.03,
            adapt_window: 400,
            ..HmcConfig::default()
        },
        seed: 99,
        threads: None,
        progress: false,
    };
    let samples = run_gibbs(&model, &opts)?;
    for d in &samples.diagnostics {
        println!(
            "chain {}: hmc acceptance {:.2}, final step size {:.4}",
            d.chain,
            d.acceptance_rate(),
            d.final_step_size
        );
    }

    // Flux scores against the known truth.
    let flux = samples.flux_matrix();
    println!(
        "flux scores: rmspe = {:.3} g/s, mcrps = {:.3} g/s",
        score_rmspe(&truth, &flux)?,
        score_mcrps(&truth, &flux)?
    );

    // Posterior transformation parameter.
    let mean_lambda: f64 = samples
        .draws
        .iter()
        .filter_map(|d| d.params.lambda)
        .sum::<f64>()
        / samples.n_draws() as f64;
    println!("posterior mean transformation parameter: {mean_lambda:.3} (truth 0)");

    // Whole-domain total with its credible interval.
    let whole = RegionMask {
        name: "whole".into(),
        cells: samples.cell_ids.clone(),
    };
    let agg = aggregate_flux(&samples, &whole, FluxUnit::TeragramsPerYear)?;
    let truth_total = FluxUnit::TeragramsPerYear.from_grams_per_second(truth.sum());
    println!(
        "whole-domain total: median {:.4} Tg/yr, 95% interval [{:.4}, {:.4}], truth {:.4}",
        agg.median, agg.lower95, agg.upper95, truth_total
    );

    // Mole-fraction validation at a few held-out slots.
    let probe: Vec<(usize, usize)> = held_out.into_iter().take(50).collect();
    if !probe.is_empty() {
        let mf = posterior_molefraction(&samples, &model, &probe, &mut rng)?;
        println!(
            "posterior mole fractions reconstructed at {} held-out slots \
             (first slot mean {:.2} ppb)",
            probe.len(),
            mf.column(0).sum() / mf.nrows() as f64
        );
    }
    Ok(())
}
