//! Command entry points behind the `fluxinv` binary: forward simulation,
//! inference, scoring, and the cumulant demonstration.
//!
//! `simulate` writes a complete experiment into `<output>/truth/`;
//! `infer` reads those files (or any compatible set), runs the Gibbs
//! sampler, and writes posterior samples into `<output>/posterior/`;
//! `diagnose` scores a posterior directory against a truth directory.
//! All randomness in a run flows from the single `seed` key.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::boxcox::BoxCoxParam;
use crate::config::{fnv1a, ConfigFile, CONFIG_SCHEMA_VERSION};
use crate::covariance::{DiscrepancyParams, FluxCorrParams};
use crate::cumulants;
use crate::formats;
use crate::model::{
    FluxCorrStructure, HierarchicalModel, ModelVariant, SensitivityStack, SpatialGrid,
    StationSet,
};
use crate::osse::{
    aggregate_flux, posterior_molefraction, scale_inventory, score_mcrps, score_rmspe,
    simulate_boxcox_field, simulate_observations, synth_sensitivities, BoxCoxFieldSpec,
    FluxUnit, Missingness, PlumeParams,
};
use crate::samplers::{run_gibbs, GibbsOptions, HmcConfig, McmcSchedule};
use crate::{FluxError, Result};

/// Standard file names inside a truth directory.
mod truth_files {
    pub const GRID: &str = "grid.csv";
    pub const STATIONS: &str = "stations.csv";
    pub const SENSITIVITIES: &str = "sensitivities.csv";
    pub const OBSERVATIONS: &str = "observations.csv";
    pub const TRUTH_FLUX: &str = "truth_flux.csv";
    pub const TRUTH_MF: &str = "truth_molefractions.csv";
    pub const INVENTORY: &str = "inventory.csv";
    pub const MANIFEST: &str = "manifest.txt";
}

fn resolve_grid(cfg: &ConfigFile) -> Result<SpatialGrid> {
    if let Some(path) = cfg.get_path("grid", "file")? {
        return formats::load_grid(&path);
    }
    let nx = cfg.require_usize("grid", "nx")?;
    let ny = cfg.require_usize("grid", "ny")?;
    if nx == 0 || ny == 0 {
        return Err(FluxError::Config("grid nx and ny must be positive".into()));
    }
    let lon0 = cfg.require_f64("grid", "lon0")?;
    let lat0 = cfg.require_f64("grid", "lat0")?;
    let dlon = cfg.require_f64("grid", "dlon")?;
    let dlat = cfg.require_f64("grid", "dlat")?;
    let split_lat = cfg.get_f64("grid", "split_lat")?;
    let n = nx * ny;
    let mut ids = Vec::with_capacity(n);
    let mut coords = Vec::with_capacity(n);
    for j in 0..ny {
        for i in 0..nx {
            ids.push(format!("c{:04}", j * nx + i));
            coords.push([lon0 + i as f64 * dlon, lat0 + j as f64 * dlat]);
        }
    }
    let covariates = match split_lat {
        // Indicator design: cells above the split latitude in the first
        // column, the rest in the second.
        Some(split) => DMatrix::from_fn(n, 2, |r, c| {
            let above = coords[r][1] > split;
            if (c == 0) == above {
                1.0
            } else {
                0.0
            }
        }),
        None => DMatrix::from_element(n, 1, 1.0),
    };
    if let Some(split) = split_lat {
        let above = coords.iter().filter(|c| c[1] > split).count();
        if above == 0 || above == n {
            return Err(FluxError::Config(format!(
                "split_lat {split} puts every cell on one side; use a value inside the grid"
            )));
        }
    }
    SpatialGrid::new(ids, coords, DVector::from_element(n, 1.0), covariates)
}

fn resolve_stations(
    cfg: &ConfigFile,
    grid: &SpatialGrid,
    rng: &mut impl Rng,
) -> Result<StationSet> {
    if let Some(path) = cfg.get_path("stations", "file")? {
        return formats::load_stations(&path);
    }
    let count = cfg.require_usize("stations", "count")?;
    if count == 0 {
        return Err(FluxError::Config("station count must be positive".into()));
    }
    let (mut lon_min, mut lon_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lat_min, mut lat_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in grid.coords() {
        lon_min = lon_min.min(c[0]);
        lon_max = lon_max.max(c[0]);
        lat_min = lat_min.min(c[1]);
        lat_max = lat_max.max(c[1]);
    }
    let ids = (1..=count).map(|k| format!("st{k}")).collect();
    let coords = (0..count)
        .map(|_| {
            [
                rng.gen_range(lon_min..=lon_max),
                rng.gen_range(lat_min..=lat_max),
            ]
        })
        .collect();
    StationSet::new(ids, coords)
}

fn truth_field_spec(cfg: &ConfigFile, grid: &SpatialGrid) -> Result<BoxCoxFieldSpec> {
    let corr = match (cfg.get_f64("truth", "theta11")?, cfg.get_f64("truth", "theta12")?) {
        (Some(t11), Some(t12)) => FluxCorrStructure::PoweredExp(FluxCorrParams::new(t11, t12)?),
        (None, None) => FluxCorrStructure::Identity,
        _ => {
            return Err(FluxError::Config(
                "[truth] theta11 and theta12 must be given together".into(),
            ))
        }
    };
    let beta = DVector::from_vec(cfg.require_f64_list("truth", "beta")?);
    if beta.len() != grid.covariates().ncols() {
        return Err(FluxError::Config(format!(
            "[truth] beta has {} entries, grid design has {} columns",
            beta.len(),
            grid.covariates().ncols()
        )));
    }
    Ok(BoxCoxFieldSpec {
        corr,
        tau1: cfg.require_f64("truth", "tau1")?,
        beta,
        lambda: BoxCoxParam::new(cfg.require_f64("truth", "lambda")?)?,
    })
}

fn resolve_truth(
    cfg: &ConfigFile,
    grid: &SpatialGrid,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    if let Some(path) = cfg.get_path("truth", "file")? {
        return formats::load_inventory(&path, grid);
    }
    simulate_boxcox_field(grid, &truth_field_spec(cfg, grid)?, rng)
}

fn resolve_inventory(
    cfg: &ConfigFile,
    grid: &SpatialGrid,
    truth: &DVector<f64>,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    let source = cfg.get("inventory", "source").unwrap_or("truth");
    let mut w = match source {
        "truth" => truth.clone(),
        "file" => {
            let path = cfg.require_path("inventory", "file")?;
            formats::load_inventory(&path, grid)?
        }
        "simulate" => simulate_boxcox_field(grid, &truth_field_spec(cfg, grid)?, rng)?,
        other => {
            return Err(FluxError::Config(format!(
                "[inventory] source must be truth, file, or simulate; got '{other}'"
            )))
        }
    };
    let mean = cfg.get_f64("inventory", "target_mean")?;
    let var = cfg.get_f64("inventory", "target_variance")?;
    match (mean, var) {
        (Some(m), Some(v)) => w = scale_inventory(&w, m, v)?,
        (None, None) => {}
        _ => {
            return Err(FluxError::Config(
                "[inventory] target_mean and target_variance must be given together".into(),
            ))
        }
    }
    Ok(w)
}

fn hash_files(paths: &[PathBuf]) -> Result<u64> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend_from_slice(&std::fs::read(p)?);
    }
    Ok(fnv1a(&bytes))
}

/// Forward-simulate an experiment and write it into `<output>/truth/`.
pub fn cmd_simulate(config_path: &Path, seed_override: Option<u64>) -> Result<()> {
    let cfg = ConfigFile::parse(config_path)?;
    let seed = match seed_override {
        Some(s) => s,
        None => cfg.require_u64("run", "seed")?,
    };
    let out_dir = cfg.require_path("run", "output")?.join("truth");
    std::fs::create_dir_all(&out_dir)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let grid = resolve_grid(&cfg)?;
    let stations = resolve_stations(&cfg, &grid, &mut rng)?;
    let n_time = cfg.require_usize("sensitivities", "t")?;
    if n_time == 0 {
        return Err(FluxError::Config("[sensitivities] t must be positive".into()));
    }

    let truth = resolve_truth(&cfg, &grid, &mut rng)?;

    let stack = match cfg.get_path("sensitivities", "file")? {
        Some(path) => formats::load_sensitivities(&path, &grid, &stations, n_time)?,
        None => {
            let mean_truth = truth.sum() / truth.len() as f64;
            let plume = PlumeParams {
                reference_flux: cfg
                    .get_f64("sensitivities", "reference_flux")?
                    .unwrap_or(mean_truth),
                target_signal: cfg
                    .get_f64("sensitivities", "target_signal")?
                    .unwrap_or(30.0),
                footprint_width: cfg
                    .get_f64("sensitivities", "footprint_width")?
                    .unwrap_or(1.0),
                wind_persistence: cfg
                    .get_f64("sensitivities", "wind_persistence")?
                    .unwrap_or(0.95),
            };
            synth_sensitivities(&grid, stations.coords(), n_time, &plume, &mut rng)?
        }
    };

    let disc = DiscrepancyParams::new(
        cfg.require_f64("discrepancy", "tau2")?,
        cfg.require_f64("discrepancy", "a")?,
        cfg.require_f64("discrepancy", "d")?,
    )?;
    let variance = cfg.require_f64("observations", "variance")?;
    let missing_fraction = cfg
        .get_f64("observations", "missing_fraction")?
        .unwrap_or(0.1);
    let missingness = if missing_fraction == 0.0 {
        Missingness::None
    } else if missing_fraction > 0.0 && missing_fraction < 1.0 {
        Missingness::Fraction(missing_fraction)
    } else {
        return Err(FluxError::Config(format!(
            "[observations] missing_fraction {missing_fraction} must lie in [0, 1)"
        )));
    };
    let (obs, y2_true) = simulate_observations(
        &truth,
        &stack,
        stations.coords(),
        &disc,
        variance,
        &missingness,
        &mut rng,
    )?;

    let inventory = resolve_inventory(&cfg, &grid, &truth, &mut rng)?;

    formats::write_grid(&grid, &out_dir.join(truth_files::GRID))?;
    formats::write_stations(&stations, &out_dir.join(truth_files::STATIONS))?;
    formats::write_sensitivities(
        &stack,
        &grid,
        &stations,
        &out_dir.join(truth_files::SENSITIVITIES),
    )?;
    formats::write_observations(&obs, &stations, &out_dir.join(truth_files::OBSERVATIONS))?;
    formats::write_inventory(&truth, &grid, &out_dir.join(truth_files::TRUTH_FLUX))?;
    formats::write_molefractions(&y2_true, &stations, &out_dir.join(truth_files::TRUTH_MF))?;
    formats::write_inventory(&inventory, &grid, &out_dir.join(truth_files::INVENTORY))?;

    let data_files: Vec<PathBuf> = [
        truth_files::GRID,
        truth_files::STATIONS,
        truth_files::SENSITIVITIES,
        truth_files::OBSERVATIONS,
        truth_files::TRUTH_FLUX,
        truth_files::TRUTH_MF,
        truth_files::INVENTORY,
    ]
    .iter()
    .map(|f| out_dir.join(f))
    .collect();
    let outputs_hash = hash_files(&data_files)?;
    let canonical = cfg.canonical_text();
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(
        out_dir.join(truth_files::MANIFEST),
    )?);
    writeln!(manifest, "# fluxinv simulate manifest")?;
    writeln!(manifest, "schema_version = {CONFIG_SCHEMA_VERSION}")?;
    writeln!(manifest, "seed = {seed}")?;
    writeln!(manifest, "config_hash = {:016x}", fnv1a(canonical.as_bytes()))?;
    writeln!(manifest, "outputs_hash = {outputs_hash:016x}")?;
    writeln!(manifest)?;
    manifest.write_all(canonical.as_bytes())?;
    Ok(())
}

/// Everything `infer` loads from disk.
struct InferInputs {
    grid: SpatialGrid,
    stations: StationSet,
    stack: SensitivityStack,
    model_files: Vec<PathBuf>,
    n_time: usize,
    observations_path: PathBuf,
    inventory_path: PathBuf,
}

fn resolve_inputs(cfg: &ConfigFile) -> Result<InferInputs> {
    let base = match cfg.get_path("inputs", "dir")? {
        Some(dir) => dir,
        None => cfg.require_path("run", "output")?.join("truth"),
    };
    let file = |key: &str, default: &str| -> Result<PathBuf> {
        Ok(match cfg.get_path("inputs", key)? {
            Some(p) => p,
            None => base.join(default),
        })
    };
    let grid_path = file("grid", truth_files::GRID)?;
    let stations_path = file("stations", truth_files::STATIONS)?;
    let sens_path = file("sensitivities", truth_files::SENSITIVITIES)?;
    let observations_path = file("observations", truth_files::OBSERVATIONS)?;
    let inventory_path = file("inventory", truth_files::INVENTORY)?;
    let n_time = match cfg.get_usize("inputs", "t")? {
        Some(t) => t,
        None => cfg.require_usize("sensitivities", "t")?,
    };
    let grid = formats::load_grid(&grid_path)?;
    let stations = formats::load_stations(&stations_path)?;
    let stack = formats::load_sensitivities(&sens_path, &grid, &stations, n_time)?;
    Ok(InferInputs {
        grid,
        stations,
        stack,
        model_files: vec![
            grid_path,
            stations_path,
            sens_path,
            observations_path.clone(),
            inventory_path.clone(),
        ],
        n_time,
        observations_path,
        inventory_path,
    })
}

fn env_thread_cap() -> Result<Option<usize>> {
    match std::env::var("FLUXINV_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().map_err(|_| {
                FluxError::Config(format!("FLUXINV_THREADS must be a positive integer, got '{v}'"))
            })?;
            if n == 0 {
                return Err(FluxError::Config(
                    "FLUXINV_THREADS must be a positive integer".into(),
                ));
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

/// Run the Gibbs sampler against the configured inputs and write the
/// posterior into `<output>/posterior/`.
pub fn cmd_infer(config_path: &Path, seed_override: Option<u64>) -> Result<()> {
    let started = std::time::Instant::now();
    let cfg = ConfigFile::parse(config_path)?;
    let seed = match seed_override {
        Some(s) => s,
        None => cfg.require_u64("run", "seed")?,
    };
    let variant = ModelVariant::from_id(
        cfg.get_usize("run", "variant")?.unwrap_or(1) as u8,
    )?;
    let out_dir = cfg.require_path("run", "output")?.join("posterior");
    std::fs::create_dir_all(&out_dir)?;

    let inputs = resolve_inputs(&cfg)?;
    let observations =
        formats::load_observations(&inputs.observations_path, &inputs.stations, inputs.n_time)?;
    let inventory = formats::load_inventory(&inputs.inventory_path, &inputs.grid)?;
    let inputs_hash = hash_files(&inputs.model_files)?;
    let bounds = cfg.prior_bounds()?;
    let model = HierarchicalModel::new(
        inputs.grid,
        inputs.stations,
        inputs.stack,
        observations,
        inventory,
        bounds,
    )?;

    let schedule = McmcSchedule {
        n_chains: cfg.get_usize("mcmc", "chains")?.unwrap_or(2),
        n_iter: cfg.get_usize("mcmc", "iterations")?.unwrap_or(3000),
        burn_in: cfg.get_usize("mcmc", "burn_in")?.unwrap_or(1500),
        thin: cfg.get_usize("mcmc", "thin")?.unwrap_or(5),
    };
    let hmc = HmcConfig {
        step_size: cfg.get_f64("mcmc", "step_size")?.unwrap_or(0.05),
        leapfrog_min: cfg.get_usize("mcmc", "leapfrog_min")?.unwrap_or(10),
        leapfrog_max: cfg.get_usize("mcmc", "leapfrog_max")?.unwrap_or(25),
        adapt_window: cfg.get_usize("mcmc", "adapt")?.unwrap_or(500),
        ..HmcConfig::default()
    };
    let threads = match (cfg.get_usize("mcmc", "threads")?, env_thread_cap()?) {
        (Some(c), Some(e)) => Some(c.min(e)),
        (Some(c), None) => Some(c),
        (None, Some(e)) => Some(e),
        (None, None) => None,
    };
    let opts = GibbsOptions {
        schedule,
        variant,
        hmc,
        seed,
        threads,
        progress: true,
    };
    let samples = run_gibbs(&model, &opts)?;
    formats::write_samples(&samples, &out_dir)?;

    // Posterior mole fractions at every held-out slot, for validation.
    let mut held_out = Vec::new();
    for t in 0..model.n_time() {
        for s in 0..model.n_stations() {
            if !model.observations().is_observed(t, s) {
                held_out.push((t, s));
            }
        }
    }
    if !held_out.is_empty() {
        let mut mf_rng = ChaCha20Rng::seed_from_u64(seed);
        mf_rng.set_stream(schedule.n_chains as u64 + 1);
        let mf_draws = posterior_molefraction(&samples, &model, &held_out, &mut mf_rng)?;
        formats::write_molefraction_samples(
            &mf_draws,
            &held_out,
            model.stations(),
            &out_dir.join("mf_samples.csv"),
        )?;
    }

    let acceptance: Vec<f64> = samples
        .diagnostics
        .iter()
        .map(|d| d.acceptance_rate())
        .collect();
    let step_sizes: Vec<f64> = samples
        .diagnostics
        .iter()
        .map(|d| d.final_step_size)
        .collect();
    let summary = serde_json::json!({
        "command": "infer",
        "schema_version": CONFIG_SCHEMA_VERSION,
        "seed": seed,
        "variant": variant.id(),
        "chains": schedule.n_chains,
        "iterations": schedule.n_iter,
        "burn_in": schedule.burn_in,
        "thin": schedule.thin,
        "retained_draws": samples.n_draws(),
        "held_out_slots": held_out.len(),
        "hmc_acceptance": acceptance,
        "final_step_sizes": step_sizes,
        "config_hash": format!("{:016x}", fnv1a(cfg.canonical_text().as_bytes())),
        "inputs_hash": format!("{inputs_hash:016x}"),
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("summary.jsonl"))?);
    writeln!(f, "{summary}")?;
    Ok(())
}

fn read_variant_from_summary(samples_dir: &Path) -> Option<u8> {
    let text = std::fs::read_to_string(samples_dir.join("summary.jsonl")).ok()?;
    let line = text.lines().next()?;
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    value.get("variant")?.as_u64().map(|v| v as u8)
}

/// Score a posterior directory against a truth directory; optionally
/// aggregate over region masks. Returns the scores row it wrote.
pub fn cmd_diagnose(
    truth_dir: &Path,
    samples_dir: &Path,
    masks_path: Option<&Path>,
    out_path: Option<&Path>,
) -> Result<String> {
    let grid = formats::load_grid(&truth_dir.join(truth_files::GRID))?;
    let stations = formats::load_stations(&truth_dir.join(truth_files::STATIONS))?;
    let truth_flux = formats::load_inventory(&truth_dir.join(truth_files::TRUTH_FLUX), &grid)?;
    let samples = formats::load_samples(samples_dir)?;
    if samples.cell_ids != grid.cell_ids() {
        return Err(FluxError::Parameter(
            "posterior samples and truth grid cover different cell sets".into(),
        ));
    }

    let flux_matrix = samples.flux_matrix();
    let flux_rmspe = score_rmspe(&truth_flux, &flux_matrix)?;
    let flux_mcrps = score_mcrps(&truth_flux, &flux_matrix)?;

    let mf_path = samples_dir.join("mf_samples.csv");
    let (mf_rmspe, mf_mcrps) = if mf_path.exists() {
        let (mf_draws, slots) = formats::load_molefraction_samples(&mf_path, &stations)?;
        let n_time = slots.iter().map(|&(t, _)| t + 1).max().unwrap_or(1);
        let y2_true =
            formats::load_molefractions(&truth_dir.join(truth_files::TRUTH_MF), &stations, {
                // The truth table covers the full layout; size from it.
                let raw = std::fs::read_to_string(truth_dir.join(truth_files::TRUTH_MF))?;
                let max_t = raw
                    .lines()
                    .skip(2)
                    .filter_map(|l| l.split(',').next())
                    .filter_map(|t| t.parse::<usize>().ok())
                    .max()
                    .unwrap_or(n_time);
                max_t
            })?;
        let truth_at_slots = DVector::from_fn(slots.len(), |j, _| {
            let (t, s) = slots[j];
            y2_true[(t, s)]
        });
        (
            score_rmspe(&truth_at_slots, &mf_draws)?,
            score_mcrps(&truth_at_slots, &mf_draws)?,
        )
    } else {
        eprintln!(
            "warning: {} not found; mole-fraction scores reported as NaN",
            mf_path.display()
        );
        (f64::NAN, f64::NAN)
    };

    let model_id = read_variant_from_summary(samples_dir).unwrap_or(samples.variant.id());
    let row = format!("{model_id},{flux_rmspe},{flux_mcrps},{mf_rmspe},{mf_mcrps}");
    let scores_path = out_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| samples_dir.join("scores.csv"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(&scores_path)?);
    writeln!(f, "model,flux_rmspe,flux_mcrps,mf_rmspe,mf_mcrps")?;
    writeln!(f, "{row}")?;
    drop(f);
    println!("model,flux_rmspe,flux_mcrps,mf_rmspe,mf_mcrps");
    println!("{row}");

    if let Some(masks_path) = masks_path {
        let masks = formats::load_masks(masks_path, &grid)?;
        let agg_path = scores_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("aggregates.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&agg_path)?);
        writeln!(
            f,
            "mask,median_gs,lower95_gs,upper95_gs,truth_gs,median_tgyr,lower95_tgyr,upper95_tgyr,truth_tgyr"
        )?;
        for mask in &masks {
            let gs = aggregate_flux(&samples, mask, FluxUnit::GramsPerSecond)?;
            let truth_total: f64 = mask
                .cells
                .iter()
                .map(|c| truth_flux[grid.index_of(c).expect("mask validated on load")])
                .sum();
            let to_tg = |v: f64| FluxUnit::TeragramsPerYear.from_grams_per_second(v);
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{}",
                gs.name,
                gs.median,
                gs.lower95,
                gs.upper95,
                truth_total,
                to_tg(gs.median),
                to_tg(gs.lower95),
                to_tg(gs.upper95),
                to_tg(truth_total)
            )?;
        }
    }
    Ok(row)
}

/// Write the one-dimensional cumulant demonstration slices as CSV.
pub fn cmd_cumulants_demo(grid_n: usize, out_dir: &Path) -> Result<()> {
    let demo = cumulants::demo_slices(grid_n)?;
    std::fs::create_dir_all(out_dir)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("kernel_at_origin.csv"))?);
    writeln!(f, "u,value")?;
    for (i, &u) in demo.grid.iter().enumerate() {
        writeln!(f, "{u},{}", demo.kernel_at_origin[i])?;
    }
    drop(f);

    let mut f =
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("cross_cumulant2.csv"))?);
    writeln!(f, "u2,value")?;
    for (i, &u) in demo.grid.iter().enumerate() {
        writeln!(f, "{u},{}", demo.cross2_at_origin[i])?;
    }
    drop(f);

    let mut f =
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("cross_cumulant3.csv"))?);
    writeln!(f, "u2,u3,value")?;
    for (i, &u2) in demo.grid.iter().enumerate() {
        for (j, &u3) in demo.grid.iter().enumerate() {
            writeln!(f, "{u2},{u3},{}", demo.cross3_at_origin[(i, j)])?;
        }
    }
    drop(f);

    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("auto_cumulant3.csv"))?);
    writeln!(f, "s2,s3,value")?;
    for (i, &s2) in demo.grid.iter().enumerate() {
        for (j, &s3) in demo.grid.iter().enumerate() {
            writeln!(f, "{s2},{s3},{}", demo.auto3_at_origin[(i, j)])?;
        }
    }
    Ok(())
}

/// Convenience for tests and examples: run `simulate` then `infer` from
/// one config and return the output root.
pub fn simulate_then_infer(config_path: &Path) -> Result<PathBuf> {
    cmd_simulate(config_path, None)?;
    cmd_infer(config_path, None)?;
    let cfg = ConfigFile::parse(config_path)?;
    cfg.require_path("run", "output")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn osse_config(dir: &Path, extra: &str) -> PathBuf {
        let out = dir.join("run");
        let text = format!(
            "[run]\nseed = 11\nvariant = 2\noutput = {}\n\
             [grid]\nnx = 3\nny = 2\nlon0 = -2.0\nlat0 = 50.0\ndlon = 0.7\ndlat = 0.5\n\
             [stations]\ncount = 2\n\
             [sensitivities]\nt = 12\ntarget_signal = 20\n\
             [truth]\ntheta11 = 0.8\ntheta12 = 1.5\ntau1 = 1.0\nlambda = 0.0\nbeta = 0.3\n\
             [discrepancy]\ntau2 = 0.25\na = 0.6\nd = 2.0\n\
             [observations]\nvariance = 1.0\nmissing_fraction = 0.15\n\
             [mcmc]\nchains = 2\niterations = 60\nburn_in = 20\nthin = 2\nadapt = 10\nthreads = 1\n\
             {extra}",
            out.display()
        );
        let path = dir.join("run.ini");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn simulate_is_deterministic() {
        let dir = TempDir::new().unwrap();
        let cfg = osse_config(dir.path(), "");
        cmd_simulate(&cfg, None).unwrap();
        let first: Vec<(String, Vec<u8>)> = {
            let truth = dir.path().join("run/truth");
            let mut files: Vec<_> = std::fs::read_dir(&truth)
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            files.sort();
            files
                .iter()
                .map(|p| {
                    (
                        p.file_name().unwrap().to_string_lossy().into_owned(),
                        std::fs::read(p).unwrap(),
                    )
                })
                .collect()
        };
        cmd_simulate(&cfg, None).unwrap();
        for (name, bytes) in &first {
            let again = std::fs::read(dir.path().join("run/truth").join(name)).unwrap();
            assert_eq!(&again, bytes, "{name} differs between identical runs");
        }
        assert!(first.iter().any(|(n, _)| n == "observations.csv"));
        assert!(first.iter().any(|(n, _)| n == "manifest.txt"));
    }

    #[test]
    fn simulate_requires_seed() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("run.ini");
        std::fs::write(
            &path,
            "[run]\noutput = out\n[grid]\nnx = 2\nny = 2\nlon0 = 0\nlat0 = 0\ndlon = 1\ndlat = 1\n",
        )
        .unwrap();
        let err = cmd_simulate(&path, None).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
        // A seed override fills the gap (the next missing key differs).
        let err = cmd_simulate(&path, Some(3)).unwrap_err().to_string();
        assert!(!err.contains("'seed'"), "{err}");
    }

    #[test]
    fn full_pipeline_runs_and_scores() {
        let dir = TempDir::new().unwrap();
        let cfg = osse_config(dir.path(), "");
        let out = simulate_then_infer(&cfg).unwrap();
        let truth_dir = out.join("truth");
        let posterior_dir = out.join("posterior");
        assert!(posterior_dir.join("flux_samples.csv").exists());
        assert!(posterior_dir.join("param_samples.csv").exists());
        assert!(posterior_dir.join("mf_samples.csv").exists());
        assert!(posterior_dir.join("summary.jsonl").exists());

        // Variant 2: lambda fixed to zero, so no lambda rows.
        let params = std::fs::read_to_string(posterior_dir.join("param_samples.csv")).unwrap();
        assert!(!params.contains("lambda"));
        assert!(params.contains("theta11"));

        let masks_path = dir.path().join("masks.csv");
        std::fs::write(
            &masks_path,
            "# schema: masks v1\nmask_name,cell_id\nwhole,c0000\nwhole,c0001\nwhole,c0002\nwhole,c0003\nwhole,c0004\nwhole,c0005\n",
        )
        .unwrap();
        let row = cmd_diagnose(&truth_dir, &posterior_dir, Some(&masks_path), None).unwrap();
        assert!(row.starts_with("2,"), "model column from summary: {row}");
        let scores = std::fs::read_to_string(posterior_dir.join("scores.csv")).unwrap();
        assert!(scores.starts_with("model,flux_rmspe,flux_mcrps,mf_rmspe,mf_mcrps\n"));
        let fields: Vec<&str> = scores.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(fields.len(), 5);
        for v in &fields[1..] {
            let parsed: f64 = v.parse().unwrap();
            assert!(parsed.is_finite() && parsed >= 0.0);
        }
        assert!(posterior_dir.join("aggregates.csv").exists());
    }

    #[test]
    fn variant4_strips_theta_columns() {
        let dir = TempDir::new().unwrap();
        let cfg_path = osse_config(dir.path(), "");
        // Rewrite with variant 4.
        let text = std::fs::read_to_string(&cfg_path)
            .unwrap()
            .replace("variant = 2", "variant = 4");
        std::fs::write(&cfg_path, text).unwrap();
        simulate_then_infer(&cfg_path).unwrap();
        let params = std::fs::read_to_string(
            dir.path().join("run/posterior/param_samples.csv"),
        )
        .unwrap();
        assert!(!params.contains("theta11"));
        assert!(params.contains("lambda"));
    }

    #[test]
    fn reference_shaped_simulate_run() {
        // 122 cells, 4 stations, 1080 two-hour steps: the observation
        // table covers the 4320 slots minus the missing ones.
        let dir = TempDir::new().unwrap();
        let out = dir.path().join("run");
        let text = format!(
            "[run]\nseed = 2014\noutput = {}\n\
             [grid]\nnx = 61\nny = 2\nlon0 = -10.0\nlat0 = 50.0\ndlon = 0.18\ndlat = 0.5\n\
             [stations]\ncount = 4\n\
             [sensitivities]\nt = 1080\n\
             [truth]\ntheta11 = 0.8\ntheta12 = 1.5\ntau1 = 1.0\nlambda = 0.0\nbeta = 0.0\n\
             [discrepancy]\ntau2 = 0.01\na = 0.9\nd = 2.5\n\
             [observations]\nvariance = 1.0\nmissing_fraction = 0.1\n",
            out.display()
        );
        let cfg = dir.path().join("run.ini");
        std::fs::write(&cfg, text).unwrap();
        cmd_simulate(&cfg, None).unwrap();

        let obs = std::fs::read_to_string(out.join("truth/observations.csv")).unwrap();
        let rows = obs.lines().count() - 2; // schema comment + header
        assert!(rows < 4320, "some slots must be missing, got {rows}");
        assert!(rows > (4320.0 * 0.85) as usize, "too many slots dropped: {rows}");
        let grid = std::fs::read_to_string(out.join("truth/grid.csv")).unwrap();
        assert_eq!(grid.lines().count() - 2, 122);
    }

    #[test]
    fn cumulants_demo_row_counts() {
        let dir = TempDir::new().unwrap();
        cmd_cumulants_demo(100, dir.path()).unwrap();
        let one_d = std::fs::read_to_string(dir.path().join("cross_cumulant2.csv")).unwrap();
        assert_eq!(one_d.lines().count(), 101); // header + 100 rows
        let kernel = std::fs::read_to_string(dir.path().join("kernel_at_origin.csv")).unwrap();
        assert_eq!(kernel.lines().count(), 101);
        let two_d = std::fs::read_to_string(dir.path().join("auto_cumulant3.csv")).unwrap();
        assert_eq!(two_d.lines().count(), 10_001);
        // Grid runs over the expected midpoints.
        let first_row = one_d.lines().nth(1).unwrap();
        assert!(first_row.starts_with("-9.9,"));
    }
}
