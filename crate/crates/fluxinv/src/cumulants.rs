//! Spatial auto- and cross-cumulant functions of the bivariate process.
//!
//! The mole-fraction field is a kernel integral of the flux field plus an
//! independent Gaussian discrepancy, so every cumulant of the output is the
//! corresponding cumulant of the input contracted with the kernel (Riemann
//! weights included), and the discrepancy contributes only at orders one
//! and two. For a lognormal flux field the input cumulants are available
//! in closed form, which makes the propagation exact up to discretization.
//!
//! Everything here works on a fixed 1-D or 2-D grid: cumulants are plain
//! vectors, matrices, and rank-3 arrays over grid indices.

use nalgebra::{DMatrix, DVector};

use crate::{FluxError, Result};

/// Dense rank-3 array with uniform index arithmetic, used for third-order
/// cumulants. Sizes stay modest (the demo caps out near 100³).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Tensor3 {
            dims: (d0, d1, d2),
            data: vec![0.0; d0 * d1 * d2],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims.0 && j < self.dims.1 && k < self.dims.2);
        (i * self.dims.1 + j) * self.dims.2 + k
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl std::ops::Index<(usize, usize, usize)> for Tensor3 {
    type Output = f64;
    fn index(&self, (i, j, k): (usize, usize, usize)) -> &f64 {
        &self.data[self.offset(i, j, k)]
    }
}

impl std::ops::IndexMut<(usize, usize, usize)> for Tensor3 {
    fn index_mut(&mut self, (i, j, k): (usize, usize, usize)) -> &mut f64 {
        let off = self.offset(i, j, k);
        &mut self.data[off]
    }
}

/// Interaction kernel evaluated on a grid: `values[(s, u)] = b(s, u)` with
/// uniform spacing `du`. The Riemann-weighted matrix `B = values · du` is
/// what multiplies field vectors.
#[derive(Clone, Debug)]
pub struct Kernel1D {
    values: DMatrix<f64>,
    du: f64,
}

impl Kernel1D {
    pub fn new(values: DMatrix<f64>, du: f64) -> Result<Self> {
        if !(du > 0.0) || !du.is_finite() {
            return Err(FluxError::Parameter(format!(
                "grid spacing must be positive, got {du}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FluxError::Domain("kernel contains non-finite entries".into()));
        }
        Ok(Kernel1D { values, du })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn du(&self) -> f64 {
        self.du
    }

    /// Riemann-weighted kernel matrix `B`.
    pub fn weighted(&self) -> DMatrix<f64> {
        &self.values * self.du
    }

    pub fn n_outputs(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.values.ncols()
    }
}

/// Lognormal field on a grid: `ln Y₁` is Gaussian with the given mean
/// vector and covariance matrix (both on the log scale).
#[derive(Clone, Debug)]
pub struct LognormalFieldSpec {
    pub mean_log: DVector<f64>,
    pub cov_log: DMatrix<f64>,
}

impl LognormalFieldSpec {
    pub fn new(mean_log: DVector<f64>, cov_log: DMatrix<f64>) -> Result<Self> {
        let n = mean_log.len();
        if cov_log.nrows() != n || cov_log.ncols() != n {
            return Err(FluxError::Dimension(format!(
                "covariance is {}x{}, expected {n}x{n}",
                cov_log.nrows(),
                cov_log.ncols()
            )));
        }
        if (&cov_log - cov_log.transpose()).abs().max() > 1e-10 {
            return Err(FluxError::Domain("log-scale covariance must be symmetric".into()));
        }
        Ok(LognormalFieldSpec { mean_log, cov_log })
    }

    pub fn len(&self) -> usize {
        self.mean_log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_log.len() == 0
    }
}

/// First three auto-cumulants of a lognormal field:
/// `κ¹_i = exp(μ_i + C_ii/2)`, `κ²_ij = κ¹_i κ¹_j (e^{C_ij} − 1)`, and
/// `κ³_ijk = κ¹_i κ¹_j κ¹_k (e^{C_ij+C_ik+C_jk} − e^{C_ij} − e^{C_ik} − e^{C_jk} + 2)`.
pub fn lognormal_cumulants(spec: &LognormalFieldSpec) -> (DVector<f64>, DMatrix<f64>, Tensor3) {
    let n = spec.len();
    if n > 200 {
        eprintln!(
            "warning: third-order cumulant array for {n} grid points holds {} entries",
            n * n * n
        );
    }
    let mu = &spec.mean_log;
    let c = &spec.cov_log;
    let k1 = DVector::from_fn(n, |i, _| (mu[i] + 0.5 * c[(i, i)]).exp());
    let mut k2 = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            k2[(i, j)] = k1[i] * k1[j] * c[(i, j)].exp_m1();
        }
    }
    let mut k3 = Tensor3::zeros(n, n, n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let cij = c[(i, j)];
                let cik = c[(i, k)];
                let cjk = c[(j, k)];
                k3[(i, j, k)] = k1[i]
                    * k1[j]
                    * k1[k]
                    * ((cij + cik + cjk).exp() - cij.exp() - cik.exp() - cjk.exp() + 2.0);
            }
        }
    }
    (k1, k2, k3)
}

/// Second-order propagation through the kernel: returns
/// `κ²_{Y₂Y₂} = B κ² Bᵀ + κ²_ζ` and the cross-covariance
/// `κ²_{Y₁Y₂} = κ² Bᵀ`, with `B` the Riemann-weighted kernel.
pub fn propagate_cumulant2(
    kappa2_y1: &DMatrix<f64>,
    kernel: &Kernel1D,
    kappa2_zeta: Option<&DMatrix<f64>>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = kernel.n_inputs();
    let m = kernel.n_outputs();
    if kappa2_y1.nrows() != n || kappa2_y1.ncols() != n {
        return Err(FluxError::Dimension(format!(
            "input cumulant is {}x{}, kernel expects {n}x{n}",
            kappa2_y1.nrows(),
            kappa2_y1.ncols()
        )));
    }
    let b = kernel.weighted();
    let cross = kappa2_y1 * b.transpose();
    let mut auto = &b * &cross;
    if let Some(z) = kappa2_zeta {
        if z.nrows() != m || z.ncols() != m {
            return Err(FluxError::Dimension(format!(
                "discrepancy cumulant is {}x{}, expected {m}x{m}",
                z.nrows(),
                z.ncols()
            )));
        }
        auto += z;
    }
    Ok((auto, cross))
}

/// Third-order propagation: returns the full auto-cumulant
/// `κ³_{Y₂Y₂Y₂}(s₁,s₂,s₃) = Σ B(s₁,u₁)B(s₂,u₂)B(s₃,u₃) κ³(u₁,u₂,u₃)` and
/// the cross-cumulant slice `κ³_{Y₁Y₁Y₂}(·, ·, s)` at output index
/// `s_index`, which contracts only the third argument. The Gaussian
/// discrepancy contributes nothing at third order.
pub fn propagate_cumulant3(
    kappa3_y1: &Tensor3,
    kernel: &Kernel1D,
    s_index: usize,
) -> Result<(Tensor3, DMatrix<f64>)> {
    let n = kernel.n_inputs();
    let m = kernel.n_outputs();
    let (d0, d1, d2) = kappa3_y1.dims();
    if d0 != n || d1 != n || d2 != n {
        return Err(FluxError::Dimension(format!(
            "input cumulant is {d0}x{d1}x{d2}, kernel expects {n}x{n}x{n}"
        )));
    }
    if s_index >= m {
        return Err(FluxError::Dimension(format!(
            "slice index {s_index} out of range for {m} outputs"
        )));
    }
    let b = kernel.weighted();

    // Contract the third index first: t1[(i, j, c)] = sum_k kappa3[i,j,k] B[c,k].
    let mut t1 = Tensor3::zeros(n, n, m);
    for i in 0..n {
        for j in 0..n {
            for c in 0..m {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += kappa3_y1[(i, j, k)] * b[(c, k)];
                }
                t1[(i, j, c)] = acc;
            }
        }
    }
    let cross_slice = DMatrix::from_fn(n, n, |i, j| t1[(i, j, s_index)]);

    // Then the second index: t2[(i, b2, c)] = sum_j t1[i,j,c] B[b2,j].
    let mut t2 = Tensor3::zeros(n, m, m);
    for i in 0..n {
        for bb in 0..m {
            for c in 0..m {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += t1[(i, j, c)] * b[(bb, j)];
                }
                t2[(i, bb, c)] = acc;
            }
        }
    }
    // Finally the first index.
    let mut auto = Tensor3::zeros(m, m, m);
    for aa in 0..m {
        for bb in 0..m {
            for c in 0..m {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += t2[(i, bb, c)] * b[(aa, i)];
                }
                auto[(aa, bb, c)] = acc;
            }
        }
    }
    Ok((auto, cross_slice))
}

/// Midpoint grid of `n` cells over `[lo, hi]`.
pub fn midpoint_grid(lo: f64, hi: f64, n: usize) -> (Vec<f64>, f64) {
    let du = (hi - lo) / n as f64;
    let grid = (0..n).map(|k| lo + (k as f64 + 0.5) * du).collect();
    (grid, du)
}

/// Directional kernel: a Gaussian density in `u` centred at `s`, truncated
/// to `u ≤ s`, with standard deviation `0.5 + 0.2·|u − s|` growing away
/// from the centre, renormalized so each row integrates to one over the
/// grid. Mimics the step-at-the-station shape of wind-driven sensitivity.
pub fn truncated_gaussian_kernel(centers: &[f64], grid: &[f64], du: f64) -> Result<Kernel1D> {
    let m = centers.len();
    let n = grid.len();
    let mut values = DMatrix::zeros(m, n);
    for (row, &s) in centers.iter().enumerate() {
        let mut mass = 0.0;
        for (col, &u) in grid.iter().enumerate() {
            if u <= s {
                let sd = 0.5 + 0.2 * (u - s).abs();
                let v = (-(u - s).powi(2) / (2.0 * sd * sd)).exp();
                values[(row, col)] = v;
                mass += v * du;
            }
        }
        if mass <= 0.0 {
            return Err(FluxError::Domain(format!(
                "kernel row centred at {s} has no support on the grid"
            )));
        }
        for col in 0..n {
            values[(row, col)] /= mass;
        }
    }
    Kernel1D::new(values, du)
}

/// One-dimensional demonstration bundle: a lognormal field on the midpoint
/// grid of `[-10, 10]` with powered-exponential log-covariance
/// (θ₁₁ = 0.8, θ₁₂ = 1.7, unit precision, log-mean −2), pushed through the
/// directional truncated-Gaussian kernel, with all slices taken at the
/// origin `s = 0`.
#[derive(Clone, Debug)]
pub struct DemoSlices {
    /// Grid `D_L` (midpoints; contains 0 only for odd `grid_n`).
    pub grid: Vec<f64>,
    pub du: f64,
    /// Full grid-to-grid kernel.
    pub kernel: Kernel1D,
    /// `b(0, u)` over the grid.
    pub kernel_at_origin: DVector<f64>,
    /// `κ²_{Y₂Y₁}(0, u)` over the grid.
    pub cross2_at_origin: DVector<f64>,
    /// `κ³_{Y₂Y₁Y₁}(0, u₂, u₃)` over the grid.
    pub cross3_at_origin: DMatrix<f64>,
    /// `κ³_{Y₂Y₂Y₂}(0, s₂, s₃)` over the grid.
    pub auto3_at_origin: DMatrix<f64>,
}

/// Parameters of the demonstration field.
pub mod demo_field {
    pub const THETA11: f64 = 0.8;
    pub const THETA12: f64 = 1.7;
    pub const TAU1: f64 = 1.0;
    pub const MEAN_LOG: f64 = -2.0;
    pub const DOMAIN: (f64, f64) = (-10.0, 10.0);
}

/// Log-scale covariance of the demonstration field on a 1-D grid.
pub fn demo_log_covariance(grid: &[f64]) -> DMatrix<f64> {
    let n = grid.len();
    DMatrix::from_fn(n, n, |i, j| {
        let u = (grid[i] - grid[j]).abs();
        (-demo_field::THETA11 * u.powf(demo_field::THETA12)).exp() / demo_field::TAU1
    })
}

/// Build the demonstration slices on a `grid_n`-point midpoint grid.
pub fn demo_slices(grid_n: usize) -> Result<DemoSlices> {
    if grid_n < 21 {
        return Err(FluxError::Parameter(format!(
            "demo grid needs at least 21 points, got {grid_n}"
        )));
    }
    let (lo, hi) = demo_field::DOMAIN;
    let (grid, du) = midpoint_grid(lo, hi, grid_n);
    let spec = LognormalFieldSpec::new(
        DVector::from_element(grid_n, demo_field::MEAN_LOG),
        demo_log_covariance(&grid),
    )?;
    let (_, k2, k3) = lognormal_cumulants(&spec);

    let kernel = truncated_gaussian_kernel(&grid, &grid, du)?;
    // Slices pin the first argument at s = 0, which need not be a grid
    // point; build the single kernel row b(0, ·) for it.
    let origin_kernel = truncated_gaussian_kernel(&[0.0], &grid, du)?;
    let b0 = origin_kernel.weighted().row(0).transpose();

    // kappa2_{Y2 Y1}(0, u) = sum_j b(0,u_j) du kappa2(u_j, u).
    let cross2_at_origin = k2.transpose() * &b0;

    // kappa3_{Y2 Y1 Y1}(0, u2, u3) contracts the first index only.
    let n = grid_n;
    let mut cross3_at_origin = DMatrix::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += b0[i] * k3[(i, j, k)];
            }
            cross3_at_origin[(j, k)] = acc;
        }
    }

    // kappa3_{Y2 Y2 Y2}(0, s2, s3) contracts all three, the first with the
    // origin row: first reduce over i, then hit both remaining indices
    // with the grid kernel.
    let b = kernel.weighted();
    let auto3_at_origin = &b * &cross3_at_origin * b.transpose();

    Ok(DemoSlices {
        grid,
        du,
        kernel_at_origin: origin_kernel.values().row(0).transpose(),
        kernel,
        cross2_at_origin,
        cross3_at_origin,
        auto3_at_origin,
    })
}
