//! The hierarchical model bundle and its marginalized conditionals.
//!
//! With the regression coefficients, flux precision, and mole-fraction
//! field integrated out analytically, the Gibbs sampler needs three
//! log-densities, each defined up to an additive constant:
//!
//! - the discrepancy block `(τ₂, a, d)` given data and flux,
//! - the flux field given everything else, with its analytic gradient for
//!   Hamiltonian updates,
//! - the flux-process block `(θ₁, λ)` given the flux and inventory.
//!
//! Implementations drop every term free of the sampled block, so tests
//! compare differences between evaluations, never absolute values. The
//! truncated-normal normalizing factor is taken as one throughout (the
//! near-zero-truncation regime); nothing here attempts to compute it.
//!
//! Stacked mole-fraction vectors are time-major (`t·n_s + s`), matching
//! [`crate::covariance`].

use nalgebra::{DMatrix, DVector};

use crate::boxcox::{self, BoxCoxParam};
use crate::covariance::{
    build_separable, powered_exp_corr, BlockTridiagFactor, DiscrepancyParams, FluxCorrParams,
    SeparablePrecision,
};
use crate::{FluxError, Result};

/// `S²` below this is treated as an improper conditional rather than a
/// density value.
const S2_FLOOR: f64 = 1e-300;

/// Discretized flux domain: cell ids, coordinates, integration weights,
/// and the covariate design matrix.
#[derive(Clone, Debug)]
pub struct SpatialGrid {
    cell_ids: Vec<String>,
    coords: Vec<[f64; 2]>,
    weights: DVector<f64>,
    covariates: DMatrix<f64>,
}

impl SpatialGrid {
    pub fn new(
        cell_ids: Vec<String>,
        coords: Vec<[f64; 2]>,
        weights: DVector<f64>,
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        let n = cell_ids.len();
        if n == 0 {
            return Err(FluxError::Parameter("grid needs at least one cell".into()));
        }
        if coords.len() != n || weights.len() != n || covariates.nrows() != n {
            return Err(FluxError::Dimension(format!(
                "grid pieces disagree: {} ids, {} coords, {} weights, {} covariate rows",
                n,
                coords.len(),
                weights.len(),
                covariates.nrows()
            )));
        }
        if covariates.ncols() == 0 {
            return Err(FluxError::Parameter(
                "need at least one covariate column".into(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(FluxError::Parameter("integration weights must be positive".into()));
        }
        {
            let mut seen = std::collections::HashSet::new();
            for id in &cell_ids {
                if !seen.insert(id) {
                    return Err(FluxError::Parameter(format!("duplicate cell id '{id}'")));
                }
            }
        }
        let p = covariates.ncols();
        if covariates.clone().svd(false, false).rank(1e-10) < p {
            return Err(FluxError::Conditioning(
                "covariate matrix is rank deficient".into(),
            ));
        }
        Ok(SpatialGrid {
            cell_ids,
            coords,
            weights,
            covariates,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn index_of(&self, cell_id: &str) -> Option<usize> {
        self.cell_ids.iter().position(|c| c == cell_id)
    }
}

/// Mole-fraction station set: ids and lon-lat coordinates.
#[derive(Clone, Debug)]
pub struct StationSet {
    ids: Vec<String>,
    coords: Vec<[f64; 2]>,
}

impl StationSet {
    pub fn new(ids: Vec<String>, coords: Vec<[f64; 2]>) -> Result<Self> {
        if ids.is_empty() {
            return Err(FluxError::Parameter("need at least one station".into()));
        }
        if ids.len() != coords.len() {
            return Err(FluxError::Dimension(format!(
                "{} station ids but {} coordinates",
                ids.len(),
                coords.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if !seen.insert(id) {
                return Err(FluxError::Parameter(format!("duplicate station id '{id}'")));
            }
        }
        Ok(StationSet { ids, coords })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }
}

/// Per-time sensitivity matrices, already weight-multiplied: row `s` of
/// `B_t` maps the flux vector to the mole fraction at station `s`, time `t`.
#[derive(Clone, Debug)]
pub struct SensitivityStack {
    mats: Vec<DMatrix<f64>>,
}

impl SensitivityStack {
    pub fn new(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        if mats.is_empty() {
            return Err(FluxError::Parameter("need at least one time step".into()));
        }
        let shape = mats[0].shape();
        for (t, m) in mats.iter().enumerate() {
            if m.shape() != shape {
                return Err(FluxError::Dimension(format!(
                    "sensitivity matrix at t={t} is {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(FluxError::Domain(format!(
                    "sensitivity matrix at t={t} has non-finite entries"
                )));
            }
        }
        Ok(SensitivityStack { mats })
    }

    pub fn n_time(&self) -> usize {
        self.mats.len()
    }

    pub fn n_stations(&self) -> usize {
        self.mats[0].nrows()
    }

    pub fn n_cells(&self) -> usize {
        self.mats[0].ncols()
    }

    pub fn at(&self, t: usize) -> &DMatrix<f64> {
        &self.mats[t]
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.mats
    }

    /// Stacked application `B·y` (length `T·n_s`).
    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        let n_s = self.n_stations();
        let mut out = DVector::zeros(self.n_time() * n_s);
        for (t, m) in self.mats.iter().enumerate() {
            out.rows_mut(t * n_s, n_s).copy_from(&(m * y));
        }
        out
    }

    /// Stacked transpose application `Bᵀ·v` for `v` of length `T·n_s`.
    pub fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        let n_s = self.n_stations();
        let mut out = DVector::zeros(self.n_cells());
        for (t, m) in self.mats.iter().enumerate() {
            out += m.transpose() * v.rows(t * n_s, n_s);
        }
        out
    }

    /// Stacked column `i` of `B` (the footprint of one flux cell over all
    /// station-time slots).
    fn stacked_column(&self, i: usize) -> DVector<f64> {
        let n_s = self.n_stations();
        let mut out = DVector::zeros(self.n_time() * n_s);
        for (t, m) in self.mats.iter().enumerate() {
            out.rows_mut(t * n_s, n_s).copy_from(&m.column(i));
        }
        out
    }
}

/// One mole-fraction reading at a `(time, station)` slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObsRecord {
    pub t: usize,
    pub station: usize,
    pub value: f64,
    pub variance: f64,
}

/// Readings with their missingness pattern. A slot appears at most once;
/// absent slots define the incidence structure.
#[derive(Clone, Debug)]
pub struct ObservationSet {
    n_time: usize,
    n_stations: usize,
    records: Vec<ObsRecord>,
}

impl ObservationSet {
    pub fn new(n_time: usize, n_stations: usize, records: Vec<ObsRecord>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if r.t >= n_time || r.station >= n_stations {
                return Err(FluxError::Dimension(format!(
                    "observation at (t={}, station={}) outside a {n_time}x{n_stations} layout",
                    r.t, r.station
                )));
            }
            if !(r.variance > 0.0) || !r.variance.is_finite() {
                return Err(FluxError::Parameter(format!(
                    "observation variance must be positive, got {} at (t={}, station={})",
                    r.variance, r.t, r.station
                )));
            }
            if !r.value.is_finite() {
                return Err(FluxError::Domain(format!(
                    "non-finite observation at (t={}, station={})",
                    r.t, r.station
                )));
            }
            if !seen.insert((r.t, r.station)) {
                return Err(FluxError::Parameter(format!(
                    "duplicate observation slot (t={}, station={})",
                    r.t, r.station
                )));
            }
        }
        Ok(ObservationSet {
            n_time,
            n_stations,
            records,
        })
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn n_stations(&self) -> usize {
        self.n_stations
    }

    pub fn n_obs(&self) -> usize {
        self.records.len()
    }

    pub fn records(&self) -> &[ObsRecord] {
        &self.records
    }

    pub fn is_observed(&self, t: usize, station: usize) -> bool {
        self.records.iter().any(|r| r.t == t && r.station == station)
    }

    /// Diagonal of `CᵀV⁻¹C` over stacked slots: `1/v` where observed,
    /// zero elsewhere.
    pub fn precision_diag(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.n_time * self.n_stations);
        for r in &self.records {
            d[r.t * self.n_stations + r.station] = 1.0 / r.variance;
        }
        d
    }

    /// `CᵀV⁻¹Z₂` over stacked slots.
    pub fn weighted_values(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.n_time * self.n_stations);
        for r in &self.records {
            d[r.t * self.n_stations + r.station] = r.value / r.variance;
        }
        d
    }

    /// `Z₂ᵀV⁻¹Z₂` (a data constant, useful to oracles).
    pub fn data_quadform(&self) -> f64 {
        self.records.iter().map(|r| r.value * r.value / r.variance).sum()
    }
}

/// Uniform prior bounds for the six sampled quantities, on the scales they
/// are sampled on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorBounds {
    pub ln_tau2_inv: (f64, f64),
    pub ar_coeff: (f64, f64),
    pub ln_length: (f64, f64),
    pub theta11: (f64, f64),
    pub theta12: (f64, f64),
    pub lambda: (f64, f64),
}

impl Default for PriorBounds {
    fn default() -> Self {
        PriorBounds {
            ln_tau2_inv: (-2.0, 20.0),
            ar_coeff: (-1.0, 1.0),
            ln_length: ((0.1f64).ln(), 5.0f64.ln()),
            theta11: (0.0, 2.0),
            theta12: (0.0, 2.0),
            lambda: (-3.0, 3.0),
        }
    }
}

impl PriorBounds {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("ln_tau2_inv", self.ln_tau2_inv),
            ("ar_coeff", self.ar_coeff),
            ("ln_length", self.ln_length),
            ("theta11", self.theta11),
            ("theta12", self.theta12),
            ("lambda", self.lambda),
        ] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(FluxError::Parameter(format!(
                    "prior bounds for {name} must satisfy lo < hi, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    pub fn contains_discrepancy(&self, params: &DiscrepancyParams) -> bool {
        let ln_tau2_inv = -params.tau2().ln();
        let ln_d = params.length().ln();
        in_open(ln_tau2_inv, self.ln_tau2_inv)
            && in_open(params.ar_coeff(), self.ar_coeff)
            && in_open(ln_d, self.ln_length)
    }

    pub fn contains_corr(&self, params: &FluxCorrParams) -> bool {
        in_open(params.theta11(), self.theta11) && in_open(params.theta12(), self.theta12)
    }

    pub fn contains_lambda(&self, lambda: BoxCoxParam) -> bool {
        in_open(lambda.lambda(), self.lambda)
    }
}

fn in_open(v: f64, (lo, hi): (f64, f64)) -> bool {
    v > lo && v < hi
}

/// Flux-process correlation choice: the powered-exponential family or no
/// spatial correlation at all.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FluxCorrStructure {
    PoweredExp(FluxCorrParams),
    Identity,
}

/// How the transformation parameter is handled by a model variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMode {
    Free,
    Fixed(f64),
}

/// The six flux-field model variants: the transformation is free, fixed to
/// the log case, or fixed to the untransformed case, with or without
/// spatial correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelVariant {
    id: u8,
}

impl ModelVariant {
    pub fn from_id(id: u8) -> Result<Self> {
        if (1..=6).contains(&id) {
            Ok(ModelVariant { id })
        } else {
            Err(FluxError::Parameter(format!(
                "model variant must be in 1..=6, got {id}"
            )))
        }
    }

    pub fn id(&self) -> u8 {
        self.id
    }

    pub fn lambda_mode(&self) -> LambdaMode {
        match self.id {
            1 | 4 => LambdaMode::Free,
            2 | 5 => LambdaMode::Fixed(0.0),
            _ => LambdaMode::Fixed(1.0),
        }
    }

    pub fn spatially_correlated(&self) -> bool {
        self.id <= 3
    }
}

/// Positive flux state (the support of the flux-process density).
#[derive(Clone, Debug, PartialEq)]
pub struct FluxState {
    values: DVector<f64>,
}

impl FluxState {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(FluxError::Parameter("flux state cannot be empty".into()));
        }
        if values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(FluxError::Domain(
                "flux state must be strictly positive and finite".into(),
            ));
        }
        Ok(FluxState { values })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.values
    }
}

/// Immutable bundle of everything the conditionals need: grid,
/// sensitivities, observations, stations, inventory, and prior bounds.
#[derive(Clone, Debug)]
pub struct HierarchicalModel {
    grid: SpatialGrid,
    stations: StationSet,
    sensitivities: SensitivityStack,
    observations: ObservationSet,
    inventory: DVector<f64>,
    bounds: PriorBounds,
    obs_precision_diag: DVector<f64>,
    obs_weighted: DVector<f64>,
    ln_inventory_sum: f64,
}

impl HierarchicalModel {
    pub fn new(
        grid: SpatialGrid,
        stations: StationSet,
        sensitivities: SensitivityStack,
        observations: ObservationSet,
        inventory: DVector<f64>,
        bounds: PriorBounds,
    ) -> Result<Self> {
        bounds.validate()?;
        if sensitivities.n_cells() != grid.n_cells() {
            return Err(FluxError::Dimension(format!(
                "sensitivities cover {} cells, grid has {}",
                sensitivities.n_cells(),
                grid.n_cells()
            )));
        }
        if sensitivities.n_stations() != stations.len() {
            return Err(FluxError::Dimension(format!(
                "sensitivities cover {} stations, station set has {}",
                sensitivities.n_stations(),
                stations.len()
            )));
        }
        if observations.n_time() != sensitivities.n_time()
            || observations.n_stations() != stations.len()
        {
            return Err(FluxError::Dimension(format!(
                "observation layout {}x{} does not match model layout {}x{}",
                observations.n_time(),
                observations.n_stations(),
                sensitivities.n_time(),
                stations.len()
            )));
        }
        if inventory.len() != grid.n_cells() {
            return Err(FluxError::Dimension(format!(
                "inventory has {} entries, grid has {} cells",
                inventory.len(),
                grid.n_cells()
            )));
        }
        if inventory.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(FluxError::Domain(
                "inventory fluxes must be strictly positive".into(),
            ));
        }
        let obs_precision_diag = observations.precision_diag();
        let obs_weighted = observations.weighted_values();
        let ln_inventory_sum = inventory.iter().map(|w| w.ln()).sum();
        Ok(HierarchicalModel {
            grid,
            stations,
            sensitivities,
            observations,
            inventory,
            bounds,
            obs_precision_diag,
            obs_weighted,
            ln_inventory_sum,
        })
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn stations(&self) -> &StationSet {
        &self.stations
    }

    pub fn sensitivities(&self) -> &SensitivityStack {
        &self.sensitivities
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.observations
    }

    pub fn inventory(&self) -> &DVector<f64> {
        &self.inventory
    }

    pub fn bounds(&self) -> &PriorBounds {
        &self.bounds
    }

    pub fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    pub fn n_time(&self) -> usize {
        self.sensitivities.n_time()
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    /// Diagonal of `CᵀV⁻¹C` over stacked slots.
    pub fn obs_precision_diag(&self) -> &DVector<f64> {
        &self.obs_precision_diag
    }

    /// `CᵀV⁻¹Z₂` over stacked slots.
    pub fn obs_weighted(&self) -> &DVector<f64> {
        &self.obs_weighted
    }

    /// Discrepancy precision for the given parameters over this model's
    /// station layout.
    pub fn discrepancy_precision(&self, params: &DiscrepancyParams) -> Result<SeparablePrecision> {
        build_separable(*params, self.n_time(), self.stations.coords())
    }

    /// The flux-process correlation matrix for a structure choice, or
    /// `None` for the identity.
    pub fn flux_correlation(&self, corr: &FluxCorrStructure) -> Option<DMatrix<f64>> {
        match corr {
            FluxCorrStructure::PoweredExp(p) => Some(powered_exp_corr(*p, self.grid.coords())),
            FluxCorrStructure::Identity => None,
        }
    }
}

/// Generalised least squares `β̂ = (XᵀR⁻¹X)⁻¹XᵀR⁻¹g` with `R⁻¹` supplied
/// as an application.
pub fn gls_beta<F>(g: &DVector<f64>, x: &DMatrix<f64>, r_inv_apply: F) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let p = x.ncols();
    let mut r_inv_x = DMatrix::zeros(x.nrows(), p);
    for j in 0..p {
        r_inv_x.set_column(j, &r_inv_apply(&x.column(j).clone_owned()));
    }
    let xtrx = x.transpose() * &r_inv_x;
    let xtrg = r_inv_x.transpose() * g;
    let chol = nalgebra::Cholesky::new(xtrx).ok_or_else(|| {
        FluxError::Conditioning("normal equations are rank deficient".into())
    })?;
    Ok(chol.solve(&xtrg))
}

/// Sum of squared residuals `(g − Xβ)ᵀ R⁻¹ (g − Xβ)`.
pub fn sum_sq_residuals<F>(
    g: &DVector<f64>,
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    r_inv_apply: F,
) -> f64
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let resid = g - x * beta;
    resid.dot(&r_inv_apply(&resid))
}

/// GLS machinery for the two-block system stacking the flux field and the
/// inventory: both blocks share the correlation `R̃` and design `X`, so
/// `X̲ᵀR̲⁻¹X̲ = 2XᵀR̃⁻¹X` and all block operations reduce to single-block
/// solves.
#[derive(Clone, Debug)]
pub(crate) struct TwoBlockGls {
    r_chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    logdet_r: f64,
    x: DMatrix<f64>,
    xtrx2_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    logdet_xtrx2: f64,
    r_inv_x: DMatrix<f64>,
}

impl TwoBlockGls {
    /// `corr = None` means the identity correlation.
    pub(crate) fn new(corr: Option<DMatrix<f64>>, x: &DMatrix<f64>) -> Result<Self> {
        let (r_chol, logdet_r, r_inv_x) = match corr {
            Some(r) => {
                let chol = nalgebra::Cholesky::new(r).ok_or_else(|| {
                    FluxError::Conditioning("flux correlation is not positive-definite".into())
                })?;
                let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let r_inv_x = chol.solve(x);
                (Some(chol), logdet, r_inv_x)
            }
            None => (None, 0.0, x.clone()),
        };
        let xtrx2 = x.transpose() * &r_inv_x * 2.0;
        let xtrx2_chol = nalgebra::Cholesky::new(xtrx2).ok_or_else(|| {
            FluxError::Conditioning("stacked normal equations are rank deficient".into())
        })?;
        let logdet_xtrx2 = 2.0
            * xtrx2_chol
                .l()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        Ok(TwoBlockGls {
            r_chol,
            logdet_r,
            x: x.clone(),
            xtrx2_chol,
            logdet_xtrx2,
            r_inv_x,
        })
    }

    fn r_inv(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.r_chol {
            Some(chol) => chol.solve(v),
            None => v.clone(),
        }
    }

    /// `ln|R̲| = 2·ln|R̃|`.
    pub(crate) fn logdet_r_stacked(&self) -> f64 {
        2.0 * self.logdet_r
    }

    /// `ln|X̲ᵀR̲⁻¹X̲|`.
    pub(crate) fn logdet_normal_stacked(&self) -> f64 {
        self.logdet_xtrx2
    }

    /// GLS estimate from the two stacked blocks.
    pub(crate) fn beta_hat(&self, g1: &DVector<f64>, g2: &DVector<f64>) -> DVector<f64> {
        let rhs = self.r_inv_x.transpose() * (g1 + g2);
        self.xtrx2_chol.solve(&rhs)
    }

    /// `S²` over both blocks, together with the estimate it used.
    pub(crate) fn s_squared(
        &self,
        g1: &DVector<f64>,
        g2: &DVector<f64>,
    ) -> (f64, DVector<f64>) {
        let beta = self.beta_hat(g1, g2);
        let xb = &self.x * &beta;
        let r1 = g1 - &xb;
        let r2 = g2 - &xb;
        let s2 = r1.dot(&self.r_inv(&r1)) + r2.dot(&self.r_inv(&r2));
        (s2, beta)
    }

    /// First block of `Ψ·G̲ = R̲⁻¹(G̲ − X̲β̂)`, the only part the flux
    /// gradient needs.
    pub(crate) fn psi_first_block(&self, g1: &DVector<f64>, g2: &DVector<f64>) -> DVector<f64> {
        let beta = self.beta_hat(g1, g2);
        self.r_inv(&(g1 - &self.x * beta))
    }
}

/// Log conditional of the discrepancy block `(τ₂, a, d)` given data and
/// flux, up to an additive constant. Returns `−∞` outside the prior
/// bounds.
pub fn log_cond_discrepancy(
    params: &DiscrepancyParams,
    model: &HierarchicalModel,
    y1: &FluxState,
) -> Result<f64> {
    DiscrepancyConditional::new(model, y1)?.log_density(params)
}

/// The discrepancy conditional with the flux-dependent pieces cached, for
/// repeated evaluation inside one Gibbs sweep.
pub struct DiscrepancyConditional<'m> {
    model: &'m HierarchicalModel,
    by1: DVector<f64>,
}

impl<'m> DiscrepancyConditional<'m> {
    pub fn new(model: &'m HierarchicalModel, y1: &FluxState) -> Result<Self> {
        if y1.values().len() != model.n_cells() {
            return Err(FluxError::Dimension(format!(
                "flux state has {} entries, grid has {} cells",
                y1.values().len(),
                model.n_cells()
            )));
        }
        Ok(DiscrepancyConditional {
            model,
            by1: model.sensitivities().apply(y1.values()),
        })
    }

    pub fn log_density(&self, params: &DiscrepancyParams) -> Result<f64> {
        if !self.model.bounds().contains_discrepancy(params) {
            return Ok(f64::NEG_INFINITY);
        }
        let prec = self.model.discrepancy_precision(params)?;
        let factor = prec.shifted_factor(self.model.obs_precision_diag())?;
        let qz_by1 = prec.apply(&self.by1);
        let d = self.model.obs_weighted() + &qz_by1;
        let d_solve = factor.solve(&d);
        Ok(0.5 * (prec.logdet() - factor.logdet() - self.by1.dot(&qz_by1) + d.dot(&d_solve)))
    }
}

/// The flux-field conditional with everything that does not depend on the
/// flux vector precomputed: the quadratic and linear data terms, the
/// transformed inventory, and the GLS context.
pub struct FluxConditional<'m> {
    model: &'m HierarchicalModel,
    gls: TwoBlockGls,
    lambda: BoxCoxParam,
    g_inventory: DVector<f64>,
    quad: DMatrix<f64>,
    linear: DVector<f64>,
}

impl<'m> FluxConditional<'m> {
    pub fn new(
        model: &'m HierarchicalModel,
        disc: &DiscrepancyParams,
        corr: &FluxCorrStructure,
        lambda: BoxCoxParam,
    ) -> Result<Self> {
        let gls = TwoBlockGls::new(model.flux_correlation(corr), model.grid().covariates())?;
        let g_inventory =
            DVector::from_vec(boxcox::forward_all(model.inventory().as_slice(), lambda)?);

        let prec = model.discrepancy_precision(disc)?;
        let factor = prec.shifted_factor(model.obs_precision_diag())?;
        let n1 = model.n_cells();
        let stack = model.sensitivities();

        // Columns of B, Q_zeta B, and M^{-1} Q_zeta B.
        let mut b_cols = Vec::with_capacity(n1);
        let mut q_cols = Vec::with_capacity(n1);
        let mut minv_q_cols = Vec::with_capacity(n1);
        for i in 0..n1 {
            let b = stack.stacked_column(i);
            let q = prec.apply(&b);
            minv_q_cols.push(factor.solve(&q));
            b_cols.push(b);
            q_cols.push(q);
        }
        // quad[(i, j)] = b_i' Q b_j  -  (Q b_i)' M^{-1} (Q b_j)
        let mut quad = DMatrix::zeros(n1, n1);
        for i in 0..n1 {
            for j in 0..=i {
                let v = b_cols[i].dot(&q_cols[j]) - q_cols[i].dot(&minv_q_cols[j]);
                quad[(i, j)] = v;
                quad[(j, i)] = v;
            }
        }
        let w = factor.solve(model.obs_weighted());
        let linear = DVector::from_fn(n1, |i, _| q_cols[i].dot(&w));
        Ok(FluxConditional {
            model,
            gls,
            lambda,
            g_inventory,
            quad,
            linear,
        })
    }

    pub fn lambda(&self) -> BoxCoxParam {
        self.lambda
    }

    /// Log conditional density of the flux vector, up to an additive
    /// constant; `−∞` off the support.
    pub fn log_density(&self, y1: &DVector<f64>) -> Result<f64> {
        let n1 = self.model.n_cells();
        if y1.len() != n1 {
            return Err(FluxError::Dimension(format!(
                "flux vector has {} entries, expected {n1}", y1.len()
            )));
        }
        if y1.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Ok(f64::NEG_INFINITY);
        }
        let g_y: Vec<f64> = y1
            .iter()
            .map(|&v| boxcox::forward(v, self.lambda))
            .collect::<Result<_>>()?;
        if !boxcox::truncation_ok(&g_y, self.lambda) {
            return Ok(f64::NEG_INFINITY);
        }
        let g_y = DVector::from_vec(g_y);
        let (s2, _) = self.gls.s_squared(&g_y, &self.g_inventory);
        if !(s2 > S2_FLOOR) {
            return Err(FluxError::Improper(format!(
                "sum of squared residuals collapsed to {s2}; the stacked field lies in the \
                 covariate column space"
            )));
        }
        let quad_term = (y1.transpose() * &self.quad * y1)[(0, 0)];
        let lin_term = self.linear.dot(y1);
        let ln_jac = (self.lambda.lambda() - 1.0)
            * (y1.iter().map(|v| v.ln()).sum::<f64>() + self.model.ln_inventory_sum);
        Ok(-0.5 * quad_term + lin_term - (n1 as f64) * (s2 / 2.0).ln() + ln_jac)
    }

    /// Analytic gradient of [`Self::log_density`] at a strictly positive
    /// flux vector.
    pub fn grad(&self, y1: &DVector<f64>) -> Result<DVector<f64>> {
        let n1 = self.model.n_cells();
        if y1.len() != n1 {
            return Err(FluxError::Dimension(format!(
                "flux vector has {} entries, expected {n1}", y1.len()
            )));
        }
        if y1.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(FluxError::Domain(
                "gradient requested outside the support".into(),
            ));
        }
        let g_y: Vec<f64> = y1
            .iter()
            .map(|&v| boxcox::forward(v, self.lambda))
            .collect::<Result<_>>()?;
        if !boxcox::truncation_ok(&g_y, self.lambda) {
            return Err(FluxError::Domain(
                "gradient requested outside the truncation region".into(),
            ));
        }
        let g_y = DVector::from_vec(g_y);
        let (s2, _) = self.gls.s_squared(&g_y, &self.g_inventory);
        if !(s2 > S2_FLOOR) {
            return Err(FluxError::Improper(
                "sum of squared residuals collapsed to zero".into(),
            ));
        }
        let psi_g = self.gls.psi_first_block(&g_y, &self.g_inventory);
        let lam = self.lambda.lambda();
        let mut grad = -(&self.quad * y1) + &self.linear;
        let scale = 2.0 * n1 as f64 / s2;
        for i in 0..n1 {
            let d1 = y1[i].powf(lam - 1.0);
            grad[i] += -scale * d1 * psi_g[i] + (lam - 1.0) / y1[i];
        }
        Ok(grad)
    }
}

/// Log conditional of the flux field; convenience wrapper that rebuilds the
/// cached pieces on every call.
pub fn log_cond_flux(
    y1: &DVector<f64>,
    model: &HierarchicalModel,
    disc: &DiscrepancyParams,
    corr: &FluxCorrStructure,
    lambda: BoxCoxParam,
) -> Result<f64> {
    FluxConditional::new(model, disc, corr, lambda)?.log_density(y1)
}

/// Gradient of [`log_cond_flux`]; convenience wrapper.
pub fn grad_log_cond_flux(
    y1: &DVector<f64>,
    model: &HierarchicalModel,
    disc: &DiscrepancyParams,
    corr: &FluxCorrStructure,
    lambda: BoxCoxParam,
) -> Result<DVector<f64>> {
    FluxConditional::new(model, disc, corr, lambda)?.grad(y1)
}

/// Log conditional of the flux-process block `(θ₁, λ)` given the flux and
/// inventory, up to an additive constant. `−∞` outside the prior bounds.
pub fn log_cond_fluxparams(
    corr: &FluxCorrStructure,
    lambda: BoxCoxParam,
    y1: &FluxState,
    model: &HierarchicalModel,
) -> Result<f64> {
    if !model.bounds().contains_lambda(lambda) {
        return Ok(f64::NEG_INFINITY);
    }
    if let FluxCorrStructure::PoweredExp(p) = corr {
        if !model.bounds().contains_corr(p) {
            return Ok(f64::NEG_INFINITY);
        }
    }
    let gls = TwoBlockGls::new(model.flux_correlation(corr), model.grid().covariates())?;
    let g_y = DVector::from_vec(boxcox::forward_all(y1.values().as_slice(), lambda)?);
    let g_w = DVector::from_vec(boxcox::forward_all(model.inventory().as_slice(), lambda)?);
    let (s2, _) = gls.s_squared(&g_y, &g_w);
    if !(s2 > S2_FLOOR) {
        return Err(FluxError::Improper(format!(
            "sum of squared residuals collapsed to {s2}"
        )));
    }
    let n1 = model.n_cells() as f64;
    let ln_jac = (lambda.lambda() - 1.0)
        * (y1.values().iter().map(|v| v.ln()).sum::<f64>()
            + model.inventory().iter().map(|v| v.ln()).sum::<f64>());
    Ok(-0.5 * gls.logdet_r_stacked() - 0.5 * gls.logdet_normal_stacked() - n1 * s2.ln() + ln_jac)
}

/// Gaussian conditional of the stacked mole-fraction vector given data,
/// flux, and discrepancy parameters: mean `M⁻¹(CᵀV⁻¹Z₂ + Q_ζBY₁)` and
/// precision `M = CᵀV⁻¹C + Q_ζ`, held in factored form for sampling.
pub struct MolefractionConditional {
    mean: DVector<f64>,
    factor: BlockTridiagFactor,
}

impl MolefractionConditional {
    pub fn new(
        model: &HierarchicalModel,
        disc: &DiscrepancyParams,
        y1: &FluxState,
    ) -> Result<Self> {
        let prec = model.discrepancy_precision(disc)?;
        let factor = prec.shifted_factor(model.obs_precision_diag())?;
        let by1 = model.sensitivities().apply(y1.values());
        let d = model.obs_weighted() + prec.apply(&by1);
        let mean = factor.solve(&d);
        Ok(MolefractionConditional { mean, factor })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Marginal covariance matrix; dense, for oracle-scale problems only.
    pub fn covariance_dense(&self) -> DMatrix<f64> {
        let n = self.mean.len();
        let mut cov = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            cov.set_column(j, &self.factor.solve(&e));
        }
        cov
    }

    /// One draw of the stacked mole-fraction vector.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> DVector<f64> {
        &self.mean + self.factor.sample_zero_mean(rng)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::covariance::{dense_q_zeta, kron};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) struct SmallInstance {
        pub model: HierarchicalModel,
        pub y1: FluxState,
    }

    /// A small random but well-posed instance: n1 cells, n_s stations,
    /// T time steps, observations at ~80% of slots.
    pub(crate) fn small_instance(
        n1: usize,
        n_s: usize,
        n_t: usize,
        seed: u64,
    ) -> SmallInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell_ids = (0..n1).map(|i| format!("c{i}")).collect();
        let coords: Vec<[f64; 2]> = (0..n1)
            .map(|i| [i as f64 * 0.7, rng.gen_range(-1.0..1.0)])
            .collect();
        let weights = DVector::from_element(n1, 1.0);
        let x = DMatrix::from_fn(n1, 2, |i, j| {
            if j == 0 {
                1.0
            } else {
                (i % 3) as f64
            }
        });
        let grid = SpatialGrid::new(cell_ids, coords, weights, x).unwrap();

        let station_ids = (0..n_s).map(|s| format!("s{s}")).collect();
        let station_coords: Vec<[f64; 2]> = (0..n_s)
            .map(|s| [s as f64 * 1.3 - 1.0, 0.5 * s as f64])
            .collect();
        let stations = StationSet::new(station_ids, station_coords).unwrap();

        let mats = (0..n_t)
            .map(|_| DMatrix::from_fn(n_s, n1, |_, _| rng.gen_range(0.0..0.5)))
            .collect();
        let stack = SensitivityStack::new(mats).unwrap();

        let mut records = Vec::new();
        for t in 0..n_t {
            for s in 0..n_s {
                if rng.gen_bool(0.8) {
                    records.push(ObsRecord {
                        t,
                        station: s,
                        value: rng.gen_range(-3.0..8.0),
                        variance: rng.gen_range(0.5..2.0),
                    });
                }
            }
        }
        let obs = ObservationSet::new(n_t, n_s, records).unwrap();
        let inventory = DVector::from_fn(n1, |_, _| rng.gen_range(0.3..4.0));
        let model =
            HierarchicalModel::new(grid, stations, stack, obs, inventory, PriorBounds::default())
                .unwrap();
        let y1 = FluxState::new(DVector::from_fn(n1, |_, _| rng.gen_range(0.3..4.0))).unwrap();
        SmallInstance { model, y1 }
    }

    /// Dense log marginal likelihood ln N(Z2; C B Y1, C Sigma C' + V),
    /// dropping the -n/2 ln 2pi constant.
    fn dense_marginal_loglik(
        model: &HierarchicalModel,
        params: &DiscrepancyParams,
        y1: &DVector<f64>,
    ) -> f64 {
        let prec = model.discrepancy_precision(params).unwrap();
        let sigma = dense_q_zeta(&prec).try_inverse().unwrap();
        let n_s = model.n_stations();
        let records = model.observations().records();
        let n_obs = records.len();
        let by1 = model.sensitivities().apply(y1);

        let mut mean = DVector::zeros(n_obs);
        let mut cov = DMatrix::zeros(n_obs, n_obs);
        for (i, r) in records.iter().enumerate() {
            let idx_i = r.t * n_s + r.station;
            mean[i] = by1[idx_i];
            for (j, q) in records.iter().enumerate() {
                let idx_j = q.t * n_s + q.station;
                cov[(i, j)] = sigma[(idx_i, idx_j)];
            }
            cov[(i, i)] += r.variance;
        }
        let resid = DVector::from_fn(n_obs, |i, _| records[i].value) - mean;
        let chol = nalgebra::Cholesky::new(cov).unwrap();
        let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        -0.5 * logdet - 0.5 * resid.dot(&chol.solve(&resid))
    }

    /// Dense two-block flux-process log density
    /// -n1 ln(S^2/2) + ln J, all pieces via explicit dense algebra.
    fn dense_flux_process_logpdf(
        model: &HierarchicalModel,
        corr: &FluxCorrStructure,
        lambda: BoxCoxParam,
        y1: &DVector<f64>,
    ) -> f64 {
        let n1 = model.n_cells();
        let r = model
            .flux_correlation(corr)
            .unwrap_or_else(|| DMatrix::identity(n1, n1));
        let r_under = kron(&DMatrix::identity(2, 2), &r);
        let r_under_inv = r_under.try_inverse().unwrap();
        let x = model.grid().covariates();
        let mut x_under = DMatrix::zeros(2 * n1, x.ncols());
        x_under.rows_mut(0, n1).copy_from(x);
        x_under.rows_mut(n1, n1).copy_from(x);
        let g1 = DVector::from_vec(boxcox::forward_all(y1.as_slice(), lambda).unwrap());
        let g2 = DVector::from_vec(
            boxcox::forward_all(model.inventory().as_slice(), lambda).unwrap(),
        );
        let mut g_under = DVector::zeros(2 * n1);
        g_under.rows_mut(0, n1).copy_from(&g1);
        g_under.rows_mut(n1, n1).copy_from(&g2);

        let xtrx = x_under.transpose() * &r_under_inv * &x_under;
        let beta = xtrx
            .try_inverse()
            .unwrap()
            * x_under.transpose()
            * &r_under_inv
            * &g_under;
        let resid = &g_under - &x_under * beta;
        let s2 = (resid.transpose() * &r_under_inv * &resid)[(0, 0)];
        let ln_jac = (lambda.lambda() - 1.0)
            * (y1.iter().map(|v| v.ln()).sum::<f64>()
                + model.inventory().iter().map(|v| v.ln()).sum::<f64>());
        -(n1 as f64) * (s2 / 2.0).ln() + ln_jac
    }

    #[test]
    fn gls_beta_with_identity_is_the_mean() {
        let g = DVector::from_vec(vec![1.0, 2.0, 3.0, 6.0]);
        let x = DMatrix::from_element(4, 1, 1.0);
        let beta = gls_beta(&g, &x, |v| v.clone()).unwrap();
        assert!((beta[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn gls_beta_matches_dense_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = DMatrix::from_fn(8, 8, |_, _| rng.gen_range(-1.0..1.0));
        let r = &raw * raw.transpose() + DMatrix::identity(8, 8) * 2.0;
        let r_inv = r.clone().try_inverse().unwrap();
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let g = DVector::from_fn(8, |_, _| rng.gen_range(-2.0..2.0));

        let beta = gls_beta(&g, &x, |v| &r_inv * v).unwrap();
        let xtrx = x.transpose() * &r_inv * &x;
        let expect = xtrx.try_inverse().unwrap() * x.transpose() * &r_inv * &g;
        assert!((beta - expect).abs().max() < 1e-9);
    }

    #[test]
    fn gls_beta_duplicated_blocks_match_single_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { (i as f64).sin() });
        let g = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
        let single = gls_beta(&g, &x, |v| v.clone()).unwrap();

        let mut x2 = DMatrix::zeros(10, 2);
        x2.rows_mut(0, 5).copy_from(&x);
        x2.rows_mut(5, 5).copy_from(&x);
        let mut g2 = DVector::zeros(10);
        g2.rows_mut(0, 5).copy_from(&g);
        g2.rows_mut(5, 5).copy_from(&g);
        let stacked = gls_beta(&g2, &x2, |v| v.clone()).unwrap();
        assert!((single - stacked).abs().max() < 1e-12);
    }

    #[test]
    fn sum_sq_residuals_cases() {
        // Perfect fit.
        let x = DMatrix::from_fn(4, 1, |i, _| i as f64 + 1.0);
        let g = &x * DVector::from_element(1, 2.5);
        let beta = gls_beta(&g, &x, |v| v.clone()).unwrap();
        assert!(sum_sq_residuals(&g, &beta, &x, |v| v.clone()) < 1e-20);

        // Mean model: S^2 is the centered sum of squares.
        let ones = DMatrix::from_element(3, 1, 1.0);
        let g = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let beta = gls_beta(&g, &ones, |v| v.clone()).unwrap();
        let s2 = sum_sq_residuals(&g, &beta, &ones, |v| v.clone());
        assert!((s2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn residual_and_projector_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let n = 7;
            let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let r = &raw * raw.transpose() + DMatrix::identity(n, n);
            let r_inv = r.clone().try_inverse().unwrap();
            let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i * i) as f64 });
            let g = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));

            let beta = gls_beta(&g, &x, |v| &r_inv * v).unwrap();
            let s2 = sum_sq_residuals(&g, &beta, &x, |v| &r_inv * v);

            let xtrx_inv = (x.transpose() * &r_inv * &x).try_inverse().unwrap();
            let psi = &r_inv - &r_inv * &x * xtrx_inv * x.transpose() * &r_inv;
            let s2_psi = (g.transpose() * psi * &g)[(0, 0)];
            assert!(
                (s2 - s2_psi).abs() <= 1e-9 * s2.abs().max(1.0),
                "residual form {s2} vs projector form {s2_psi}"
            );
            assert!(s2 >= 0.0);
        }
    }

    #[test]
    fn discrepancy_conditional_rejects_out_of_bounds() {
        let inst = small_instance(3, 2, 4, 10);
        // tau2 = e^{21} puts ln tau2^{-1} = -21 below the lower bound.
        let params = DiscrepancyParams::new((21.0f64).exp(), 0.5, 1.0).unwrap();
        let v = log_cond_discrepancy(&params, &inst.model, &inst.y1).unwrap();
        assert_eq!(v, f64::NEG_INFINITY);
    }

    #[test]
    fn discrepancy_conditional_matches_dense_marginal() {
        let inst = small_instance(3, 2, 4, 11);
        let cond = DiscrepancyConditional::new(&inst.model, &inst.y1).unwrap();
        let p1 = DiscrepancyParams::new(0.5, 0.3, 1.2).unwrap();
        let p2 = DiscrepancyParams::new(0.05, -0.4, 2.4).unwrap();
        let p3 = DiscrepancyParams::new(1.3, 0.85, 0.7).unwrap();

        let ours: Vec<f64> = [p1, p2, p3]
            .iter()
            .map(|p| cond.log_density(p).unwrap())
            .collect();
        let oracle: Vec<f64> = [p1, p2, p3]
            .iter()
            .map(|p| dense_marginal_loglik(&inst.model, p, inst.y1.values()))
            .collect();
        for i in 1..3 {
            let d_ours = ours[i] - ours[0];
            let d_oracle = oracle[i] - oracle[0];
            assert!(
                (d_ours - d_oracle).abs() < 1e-7,
                "difference {i}: {d_ours} vs {d_oracle}"
            );
        }
    }

    #[test]
    fn discrepancy_conditional_ignores_unobserved_slots() {
        // Add a never-observed extra station; log densities change by a
        // constant only.
        let inst = small_instance(3, 2, 4, 12);
        let model = &inst.model;

        let mut station_ids: Vec<String> = model.stations().ids().to_vec();
        station_ids.push("extra".into());
        let mut station_coords = model.stations().coords().to_vec();
        station_coords.push([4.0, 3.0]);
        let stations = StationSet::new(station_ids, station_coords).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mats: Vec<DMatrix<f64>> = model
            .sensitivities()
            .matrices()
            .iter()
            .map(|m| {
                let mut bigger = DMatrix::zeros(3, m.ncols());
                bigger.rows_mut(0, 2).copy_from(m);
                for j in 0..m.ncols() {
                    bigger[(2, j)] = rng.gen_range(0.0..0.5);
                }
                bigger
            })
            .collect();
        let stack = SensitivityStack::new(mats).unwrap();
        let obs = ObservationSet::new(
            model.observations().n_time(),
            3,
            model.observations().records().to_vec(),
        )
        .unwrap();
        let bigger_model = HierarchicalModel::new(
            model.grid().clone(),
            stations,
            stack,
            obs,
            model.inventory().clone(),
            *model.bounds(),
        )
        .unwrap();

        let p1 = DiscrepancyParams::new(0.5, 0.3, 1.2).unwrap();
        let p2 = DiscrepancyParams::new(0.08, -0.2, 2.0).unwrap();
        let small = DiscrepancyConditional::new(model, &inst.y1).unwrap();
        let big = DiscrepancyConditional::new(&bigger_model, &inst.y1).unwrap();
        let d_small = small.log_density(&p2).unwrap() - small.log_density(&p1).unwrap();
        let d_big = big.log_density(&p2).unwrap() - big.log_density(&p1).unwrap();
        assert!(
            (d_small - d_big).abs() < 1e-7,
            "differences diverge: {d_small} vs {d_big}"
        );
    }

    #[test]
    fn flux_conditional_support() {
        let inst = small_instance(3, 2, 4, 13);
        let disc = DiscrepancyParams::new(0.5, 0.3, 1.2).unwrap();
        let corr = FluxCorrStructure::PoweredExp(FluxCorrParams::new(0.8, 1.5).unwrap());
        let lambda = BoxCoxParam::new(0.4).unwrap();
        let cond = FluxConditional::new(&inst.model, &disc, &corr, lambda).unwrap();

        let mut y = inst.y1.values().clone();
        y[1] = 0.0;
        assert_eq!(cond.log_density(&y).unwrap(), f64::NEG_INFINITY);
        y[1] = -2.0;
        assert_eq!(cond.log_density(&y).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn flux_conditional_matches_dense_composition() {
        let inst = small_instance(3, 2, 4, 14);
        let disc = DiscrepancyParams::new(0.4, 0.5, 1.5).unwrap();
        let corr = FluxCorrStructure::PoweredExp(FluxCorrParams::new(0.6, 1.2).unwrap());
        let lambda = BoxCoxParam::new(0.3).unwrap();
        let cond = FluxConditional::new(&inst.model, &disc, &corr, lambda).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut ours = Vec::new();
        let mut oracle = Vec::new();
        for _ in 0..10 {
            let y = DVector::from_fn(3, |_, _| rng.gen_range(0.2..5.0));
            ours.push(cond.log_density(&y).unwrap());
            oracle.push(
                dense_marginal_loglik(&inst.model, &disc, &y)
                    + dense_flux_process_logpdf(&inst.model, &corr, lambda, &y),
            );
        }
        for i in 1..10 {
            let d_ours = ours[i] - ours[0];
            let d_oracle = oracle[i] - oracle[0];
            assert!(
                (d_ours - d_oracle).abs() < 1e-6,
                "difference {i}: {d_ours} vs {d_oracle}"
            );
        }
    }

    #[test]
    fn flux_conditional_flattens_with_noise() {
        // Scaling observation noise by 1e6 pushes the likelihood toward
        // the prior-only difference.
        let inst = small_instance(3, 2, 4, 15);
        let disc = DiscrepancyParams::new(0.4, 0.5, 1.5).unwrap();
        let corr = FluxCorrStructure::Identity;
        let lambda = BoxCoxParam::new(0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let ya = DVector::from_fn(3, |_, _| rng.gen_range(0.2..5.0));
        let yb = DVector::from_fn(3, |_, _| rng.gen_range(0.2..5.0));

        let noisy_records: Vec<ObsRecord> = inst
            .model
            .observations()
            .records()
            .iter()
            .map(|r| ObsRecord {
                variance: r.variance * 1e6,
                ..*r
            })
            .collect();
        let noisy_obs = ObservationSet::new(
            inst.model.observations().n_time(),
            inst.model.observations().n_stations(),
            noisy_records,
        )
        .unwrap();
        let noisy_model = HierarchicalModel::new(
            inst.model.grid().clone(),
            inst.model.stations().clone(),
            inst.model.sensitivities().clone(),
            noisy_obs,
            inst.model.inventory().clone(),
            *inst.model.bounds(),
        )
        .unwrap();

        let sharp = FluxConditional::new(&inst.model, &disc, &corr, lambda).unwrap();
        let flat = FluxConditional::new(&noisy_model, &disc, &corr, lambda).unwrap();

        let prior_only = dense_flux_process_logpdf(&inst.model, &corr, lambda, &ya)
            - dense_flux_process_logpdf(&inst.model, &corr, lambda, &yb);
        let d_sharp = sharp.log_density(&ya).unwrap() - sharp.log_density(&yb).unwrap();
        let d_flat = flat.log_density(&ya).unwrap() - flat.log_density(&yb).unwrap();
        assert!(
            (d_flat - prior_only).abs() < (d_sharp - prior_only).abs() * 0.1
                || (d_flat - prior_only).abs() < 1e-3,
            "flat difference {d_flat} should approach prior-only {prior_only} (sharp {d_sharp})"
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (n1, n_s, n_t, seed) in [(3usize, 2usize, 4usize, 16u64), (6, 3, 10, 17)] {
            let inst = small_instance(n1, n_s, n_t, seed);
            let disc = DiscrepancyParams::new(0.3, 0.4, 1.8).unwrap();
            let corr = FluxCorrStructure::PoweredExp(FluxCorrParams::new(0.5, 1.4).unwrap());
            let lambda = BoxCoxParam::new(0.25).unwrap();
            let cond = FluxConditional::new(&inst.model, &disc, &corr, lambda).unwrap();

            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            for _ in 0..20 {
                let y = DVector::from_fn(n1, |_, _| rng.gen_range(0.5..4.0));
                let grad = cond.grad(&y).unwrap();
                for i in 0..n1 {
                    let h = 1e-5 * y[i];
                    let mut yp = y.clone();
                    yp[i] += h;
                    let mut ym = y.clone();
                    ym[i] -= h;
                    let fd = (cond.log_density(&yp).unwrap() - cond.log_density(&ym).unwrap())
                        / (2.0 * h);
                    let denom = grad[i].abs().max(1e-6);
                    assert!(
                        ((fd - grad[i]) / denom).abs() < 1e-5,
                        "grad[{i}] = {} vs fd {fd} at size ({n1},{n_s},{n_t})",
                        grad[i]
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_jacobian_term_vanishes_at_lambda_one() {
        // With lambda = 1 and B = 0, only the S^2 term remains; the
        // Jacobian contribution (lambda-1)/y must be exactly zero.
        let inst = small_instance(4, 2, 3, 18);
        let zero_stack = SensitivityStack::new(vec![
            DMatrix::zeros(2, 4);
            3
        ])
        .unwrap();
        let model = HierarchicalModel::new(
            inst.model.grid().clone(),
            inst.model.stations().clone(),
            zero_stack,
            inst.model.observations().clone(),
            inst.model.inventory().clone(),
            *inst.model.bounds(),
        )
        .unwrap();
        let disc = DiscrepancyParams::new(0.3, 0.4, 1.8).unwrap();
        let corr = FluxCorrStructure::Identity;
        let lambda = BoxCoxParam::new(1.0).unwrap();
        let cond = FluxConditional::new(&model, &disc, &corr, lambda).unwrap();

        let y = DVector::from_fn(4, |i, _| 1.0 + i as f64);
        let grad = cond.grad(&y).unwrap();
        // Data terms are zero (B = 0), so the gradient is purely the S^2
        // term; verify against finite differences.
        for i in 0..4 {
            let h = 1e-6;
            let mut yp = y.clone();
            yp[i] += h;
            let mut ym = y.clone();
            ym[i] -= h;
            let fd =
                (cond.log_density(&yp).unwrap() - cond.log_density(&ym).unwrap()) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-5 * grad[i].abs().max(1.0));
        }
    }

    #[test]
    fn fluxparams_conditional_bounds_and_symmetry() {
        let inst = small_instance(4, 2, 3, 19);
        let corr = FluxCorrStructure::PoweredExp(FluxCorrParams::new(0.5, 1.0).unwrap());
        let outside = BoxCoxParam::new(3.5).unwrap();
        assert_eq!(
            log_cond_fluxparams(&corr, outside, &inst.y1, &inst.model).unwrap(),
            f64::NEG_INFINITY
        );

        // Swapping the flux and inventory roles leaves the value unchanged.
        let lambda = BoxCoxParam::new(0.5).unwrap();
        let v1 = log_cond_fluxparams(&corr, lambda, &inst.y1, &inst.model).unwrap();
        let swapped_model = HierarchicalModel::new(
            inst.model.grid().clone(),
            inst.model.stations().clone(),
            inst.model.sensitivities().clone(),
            inst.model.observations().clone(),
            inst.y1.values().clone(),
            *inst.model.bounds(),
        )
        .unwrap();
        let swapped_state = FluxState::new(inst.model.inventory().clone()).unwrap();
        let v2 = log_cond_fluxparams(&corr, lambda, &swapped_state, &swapped_model).unwrap();
        assert!((v1 - v2).abs() < 1e-10);
    }

    #[test]
    fn fluxparams_conditional_matches_quadrature_oracle() {
        // Oracle: numeric integration over tau1 (log grid) of the
        // beta-marginalized density, compared through pairwise
        // differences.
        let inst = small_instance(4, 2, 3, 20);
        let model = &inst.model;
        let n1 = model.n_cells();
        let p = model.grid().covariates().ncols();

        let oracle = |corr: &FluxCorrStructure, lambda: BoxCoxParam| -> f64 {
            let r = model
                .flux_correlation(corr)
                .unwrap_or_else(|| DMatrix::identity(n1, n1));
            let r_under = kron(&DMatrix::identity(2, 2), &r);
            let r_inv = r_under.clone().try_inverse().unwrap();
            let logdet_r: f64 = nalgebra::Cholesky::new(r_under)
                .unwrap()
                .l()
                .diagonal()
                .iter()
                .map(|v| 2.0 * v.ln())
                .sum();
            let x = model.grid().covariates();
            let mut x_under = DMatrix::zeros(2 * n1, p);
            x_under.rows_mut(0, n1).copy_from(x);
            x_under.rows_mut(n1, n1).copy_from(x);
            let g1 = DVector::from_vec(
                boxcox::forward_all(inst.y1.values().as_slice(), lambda).unwrap(),
            );
            let g2 = DVector::from_vec(
                boxcox::forward_all(model.inventory().as_slice(), lambda).unwrap(),
            );
            let mut g = DVector::zeros(2 * n1);
            g.rows_mut(0, n1).copy_from(&g1);
            g.rows_mut(n1, n1).copy_from(&g2);

            let xtrx = x_under.transpose() * &r_inv * &x_under;
            let logdet_xtrx: f64 = nalgebra::Cholesky::new(xtrx.clone())
                .unwrap()
                .l()
                .diagonal()
                .iter()
                .map(|v| 2.0 * v.ln())
                .sum();
            let beta = xtrx.try_inverse().unwrap() * x_under.transpose() * &r_inv * &g;
            let resid = &g - &x_under * beta;
            let s2 = (resid.transpose() * &r_inv * &resid)[(0, 0)];

            // Integrate tau1^{n1 - 1} exp(-tau1 s2 / 2) dtau1 over a log
            // grid (the Gamma(n1, s2/2) kernel; the beta integral already
            // contributed tau1^{-p/2} and the prior tau1^{p/2 - 1}).
            let m = 4000;
            let (lo, hi) = (-30.0f64, 12.0f64);
            let step = (hi - lo) / m as f64;
            let mut acc = f64::NEG_INFINITY;
            for k in 0..=m {
                let u = lo + k as f64 * step;
                let tau1 = u.exp();
                // integrand in u-space: tau1^{n1} exp(-tau1 s2/2)
                let ln_f = (n1 as f64) * u - tau1 * s2 / 2.0;
                let w: f64 = if k == 0 || k == m { 0.5 } else { 1.0 };
                let term = ln_f + w.ln() + step.ln();
                acc = if acc > term {
                    acc + (term - acc).exp().ln_1p()
                } else {
                    term + (acc - term).exp().ln_1p()
                };
            }
            let ln_jac = (lambda.lambda() - 1.0)
                * (inst.y1.values().iter().map(|v| v.ln()).sum::<f64>()
                    + model.inventory().iter().map(|v| v.ln()).sum::<f64>());
            -0.5 * logdet_r - 0.5 * logdet_xtrx + acc + ln_jac
        };

        let cases = [
            (
                FluxCorrStructure::PoweredExp(FluxCorrParams::new(0.5, 1.0).unwrap()),
                BoxCoxParam::new(0.4).unwrap(),
            ),
            (
                FluxCorrStructure::PoweredExp(FluxCorrParams::new(1.2, 1.6).unwrap()),
                BoxCoxParam::new(-0.3).unwrap(),
            ),
            (FluxCorrStructure::Identity, BoxCoxParam::new(0.0).unwrap()),
        ];
        let ours: Vec<f64> = cases
            .iter()
            .map(|(c, l)| log_cond_fluxparams(c, *l, &inst.y1, model).unwrap())
            .collect();
        let oracles: Vec<f64> = cases.iter().map(|(c, l)| oracle(c, *l)).collect();
        for i in 1..cases.len() {
            let d_ours = ours[i] - ours[0];
            let d_oracle = oracles[i] - oracles[0];
            assert!(
                (d_ours - d_oracle).abs() < 1e-3,
                "difference {i}: {d_ours} vs {d_oracle}"
            );
        }
    }

    #[test]
    fn conditionals_invariant_under_observation_reordering() {
        let inst = small_instance(3, 2, 5, 21);
        let model = &inst.model;
        let mut reversed = model.observations().records().to_vec();
        reversed.reverse();
        let obs = ObservationSet::new(
            model.observations().n_time(),
            model.observations().n_stations(),
            reversed,
        )
        .unwrap();
        let permuted = HierarchicalModel::new(
            model.grid().clone(),
            model.stations().clone(),
            model.sensitivities().clone(),
            obs,
            model.inventory().clone(),
            *model.bounds(),
        )
        .unwrap();

        let disc = DiscrepancyParams::new(0.5, 0.3, 1.2).unwrap();
        let corr = FluxCorrStructure::PoweredExp(FluxCorrParams::new(0.8, 1.5).unwrap());
        let lambda = BoxCoxParam::new(0.2).unwrap();

        let a = log_cond_discrepancy(&disc, model, &inst.y1).unwrap();
        let b = log_cond_discrepancy(&disc, &permuted, &inst.y1).unwrap();
        assert!((a - b).abs() < 1e-10);

        let a = log_cond_flux(inst.y1.values(), model, &disc, &corr, lambda).unwrap();
        let b = log_cond_flux(inst.y1.values(), &permuted, &disc, &corr, lambda).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn molefraction_conditional_matches_dense_oracle() {
        let inst = small_instance(3, 2, 4, 22);
        let disc = DiscrepancyParams::new(0.5, 0.6, 1.4).unwrap();
        let cond = MolefractionConditional::new(&inst.model, &disc, &inst.y1).unwrap();

        let prec = inst.model.discrepancy_precision(&disc).unwrap();
        let mut m = dense_q_zeta(&prec);
        let shift = inst.model.obs_precision_diag();
        for i in 0..m.nrows() {
            m[(i, i)] += shift[i];
        }
        let m_inv = m.try_inverse().unwrap();
        let by1 = inst.model.sensitivities().apply(inst.y1.values());
        let d = inst.model.obs_weighted() + prec.apply(&by1);
        let mean_dense = &m_inv * d;

        assert!((cond.mean() - &mean_dense).abs().max() < 1e-8);
        assert!((cond.covariance_dense() - m_inv).abs().max() < 1e-8);
    }

    #[test]
    fn s2_positive_when_inventory_off_column_space() {
        let inst = small_instance(5, 2, 3, 23);
        let corr = FluxCorrStructure::Identity;
        let lambda = BoxCoxParam::new(0.0).unwrap();
        // Generic inventory is almost surely off the covariate span.
        let v = log_cond_fluxparams(&corr, lambda, &inst.y1, &inst.model);
        assert!(v.unwrap().is_finite());
    }

    #[test]
    fn variant_table() {
        assert_eq!(
            ModelVariant::from_id(1).unwrap().lambda_mode(),
            LambdaMode::Free
        );
        assert_eq!(
            ModelVariant::from_id(2).unwrap().lambda_mode(),
            LambdaMode::Fixed(0.0)
        );
        assert_eq!(
            ModelVariant::from_id(3).unwrap().lambda_mode(),
            LambdaMode::Fixed(1.0)
        );
        assert!(ModelVariant::from_id(1).unwrap().spatially_correlated());
        assert!(!ModelVariant::from_id(4).unwrap().spatially_correlated());
        assert!(ModelVariant::from_id(0).is_err());
        assert!(ModelVariant::from_id(7).is_err());
    }

    #[test]
    fn flux_state_validation() {
        assert!(FluxState::new(DVector::from_vec(vec![1.0, 2.0])).is_ok());
        assert!(FluxState::new(DVector::from_vec(vec![1.0, 0.0])).is_err());
        assert!(FluxState::new(DVector::from_vec(vec![1.0, -1.0])).is_err());
        assert!(FluxState::new(DVector::from_vec(vec![1.0, f64::NAN])).is_err());
    }
}
