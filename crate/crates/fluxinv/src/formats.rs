//! File formats: grids, sensitivities, observations, inventories, masks,
//! and posterior samples.
//!
//! Every file is comma-separated with LF line endings, a `.` decimal
//! point, and a leading `# schema: <id> v1` comment that is validated on
//! load when present. Floats are written in Rust's shortest round-trip
//! decimal form, so write-then-load reproduces values bit-exactly. Time
//! indices are 1-based on disk and 0-based in memory.
//!
//! Loaders are total: malformed input of any kind yields a structured
//! error naming the file and line, never a panic or a silent default.
//! CRLF input is accepted.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::model::{
    ModelVariant, ObsRecord, ObservationSet, SensitivityStack, SpatialGrid,
    StationSet,
};
use crate::osse::RegionMask;
use crate::samplers::{ChainDiagnostics, Draw, ParamDraw, PosteriorSamples};
use crate::{FluxError, Result};

const SCHEMA_VERSION: &str = "v1";

fn schema_line(id: &str) -> String {
    format!("# schema: {id} {SCHEMA_VERSION}")
}

/// One parsed CSV: header names plus rows with their 1-based line numbers.
struct RawCsv {
    path: PathBuf,
    headers: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

impl RawCsv {
    fn err(&self, line: Option<u64>, msg: impl Into<String>) -> FluxError {
        FluxError::format(self.path.clone(), line, msg)
    }

    fn expect_headers(&self, expected: &[&str]) -> Result<()> {
        if self.headers != expected {
            return Err(self.err(
                None,
                format!(
                    "expected columns {expected:?}, found {:?}",
                    self.headers
                ),
            ));
        }
        Ok(())
    }

    fn field<'a>(&self, row: &'a (u64, Vec<String>), idx: usize) -> Result<&'a str> {
        row.1.get(idx).map(String::as_str).ok_or_else(|| {
            self.err(
                Some(row.0),
                format!("missing field {} of {}", idx + 1, self.headers.len()),
            )
        })
    }

    fn finite_f64(&self, row: &(u64, Vec<String>), idx: usize) -> Result<f64> {
        let raw = self.field(row, idx)?;
        let v: f64 = raw.trim().parse().map_err(|_| {
            self.err(
                Some(row.0),
                format!("'{raw}' in column '{}' is not a number", self.headers[idx]),
            )
        })?;
        if !v.is_finite() {
            return Err(self.err(
                Some(row.0),
                format!("non-finite value in column '{}'", self.headers[idx]),
            ));
        }
        Ok(v)
    }

    fn index_1based(&self, row: &(u64, Vec<String>), idx: usize, max: usize) -> Result<usize> {
        let raw = self.field(row, idx)?;
        let v: usize = raw.trim().parse().map_err(|_| {
            self.err(
                Some(row.0),
                format!("'{raw}' in column '{}' is not a positive integer", self.headers[idx]),
            )
        })?;
        if v == 0 || v > max {
            return Err(self.err(
                Some(row.0),
                format!("index {v} in column '{}' outside 1..={max}", self.headers[idx]),
            ));
        }
        Ok(v - 1)
    }
}

/// Read a CSV file, validating the schema comment when present and
/// skipping any further leading comment lines.
fn read_csv(path: &Path, schema_id: &str) -> Result<RawCsv> {
    let text = std::fs::read_to_string(path)?;
    let mut comment_lines = 0u64;
    let mut rest = text.as_str();
    while rest.starts_with('#') {
        let line_end = rest.find('\n').map(|i| i + 1).unwrap_or(rest.len());
        let line = rest[..line_end].trim_end_matches(['\n', '\r']);
        if comment_lines == 0 {
            let expected = schema_line(schema_id);
            if line.trim() != expected {
                return Err(FluxError::format(
                    path,
                    Some(1),
                    format!("schema comment '{line}' does not match '{expected}'"),
                ));
            }
        }
        comment_lines += 1;
        rest = &rest[line_end..];
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(rest.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| FluxError::format(path, Some(comment_lines + 1), e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| FluxError::format(path, None, e.to_string()))?;
        let line = record
            .position()
            .map(|p| p.line() + comment_lines)
            .unwrap_or(0);
        if record.len() == 1 && record[0].trim().is_empty() {
            continue; // blank line
        }
        if record.len() != headers.len() {
            return Err(FluxError::format(
                path,
                Some(line),
                format!("{} fields, expected {}", record.len(), headers.len()),
            ));
        }
        rows.push((line, record.iter().map(|f| f.to_string()).collect()));
    }
    Ok(RawCsv {
        path: path.to_path_buf(),
        headers,
        rows,
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

// ---------------------------------------------------------------------------
// Grid: cell_id,lon,lat,weight,x1[,x2,...]

pub fn load_grid(path: &Path) -> Result<SpatialGrid> {
    let raw = read_csv(path, "grid")?;
    if raw.headers.len() < 5
        || raw.headers[..4] != ["cell_id", "lon", "lat", "weight"]
    {
        return Err(raw.err(
            None,
            format!(
                "expected columns cell_id,lon,lat,weight,x1[,x2,...], found {:?}",
                raw.headers
            ),
        ));
    }
    let p = raw.headers.len() - 4;
    for (k, h) in raw.headers[4..].iter().enumerate() {
        let expected = format!("x{}", k + 1);
        if h != &expected {
            return Err(raw.err(
                None,
                format!("covariate column {} named '{h}', expected '{expected}'", k + 5),
            ));
        }
    }
    let n = raw.rows.len();
    if n == 0 {
        return Err(raw.err(None, "grid file has no rows"));
    }
    let mut ids = Vec::with_capacity(n);
    let mut seen = HashSet::new();
    let mut coords = Vec::with_capacity(n);
    let mut weights = DVector::zeros(n);
    let mut covariates = DMatrix::zeros(n, p);
    for (i, row) in raw.rows.iter().enumerate() {
        let id = raw.field(row, 0)?.trim().to_string();
        if id.is_empty() {
            return Err(raw.err(Some(row.0), "empty cell id"));
        }
        if !seen.insert(id.clone()) {
            return Err(raw.err(Some(row.0), format!("duplicate cell id '{id}'")));
        }
        coords.push([raw.finite_f64(row, 1)?, raw.finite_f64(row, 2)?]);
        let w = raw.finite_f64(row, 3)?;
        if !(w > 0.0) {
            return Err(raw.err(Some(row.0), format!("weight {w} must be positive")));
        }
        weights[i] = w;
        for k in 0..p {
            covariates[(i, k)] = raw.finite_f64(row, 4 + k)?;
        }
        ids.push(id);
    }
    SpatialGrid::new(ids, coords, weights, covariates)
        .map_err(|e| FluxError::format(path, None, e.to_string()))
}

pub fn write_grid(grid: &SpatialGrid, path: &Path) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "{}", schema_line("grid"))?;
    let p = grid.covariates().ncols();
    let xcols: Vec<String> = (1..=p).map(|k| format!("x{k}")).collect();
    writeln!(f, "cell_id,lon,lat,weight,{}", xcols.join(","))?;
    for i in 0..grid.n_cells() {
        let covs: Vec<String> = (0..p)
            .map(|k| grid.covariates()[(i, k)].to_string())
            .collect();
        writeln!(
            f,
            "{},{},{},{},{}",
            grid.cell_ids()[i],
            grid.coords()[i][0],
            grid.coords()[i][1],
            grid.weights()[i],
            covs.join(",")
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sensitivities: t,station_id,cell_id,value (sparse triples, 1-based t)

pub fn load_sensitivities(
    path: &Path,
    grid: &SpatialGrid,
    stations: &StationSet,
    n_time: usize,
) -> Result<SensitivityStack> {
    let raw = read_csv(path, "sensitivities")?;
    raw.expect_headers(&["t", "station_id", "cell_id", "value"])?;
    if n_time == 0 {
        return Err(FluxError::Parameter("need at least one time step".into()));
    }
    let mut mats = vec![DMatrix::zeros(stations.len(), grid.n_cells()); n_time];
    if raw.rows.is_empty() {
        eprintln!(
            "warning: {} contains no sensitivity triples; the stack is identically zero",
            path.display()
        );
    }
    for row in &raw.rows {
        let t = raw.index_1based(row, 0, n_time)?;
        let sid = raw.field(row, 1)?.trim();
        let s = stations
            .index_of(sid)
            .ok_or_else(|| raw.err(Some(row.0), format!("unknown station id '{sid}'")))?;
        let cid = raw.field(row, 2)?.trim();
        let c = grid
            .index_of(cid)
            .ok_or_else(|| raw.err(Some(row.0), format!("unknown cell id '{cid}'")))?;
        mats[t][(s, c)] = raw.finite_f64(row, 3)?;
    }
    SensitivityStack::new(mats).map_err(|e| FluxError::format(path, None, e.to_string()))
}

/// Write non-zero triples only; absent triples read back as zero.
pub fn write_sensitivities(
    stack: &SensitivityStack,
    grid: &SpatialGrid,
    stations: &StationSet,
    path: &Path,
) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "{}", schema_line("sensitivities"))?;
    writeln!(f, "# convention: weighted")?;
    writeln!(f, "t,station_id,cell_id,value")?;
    for (t, m) in stack.matrices().iter().enumerate() {
        for s in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(s, c)];
                if v != 0.0 {
                    writeln!(
                        f,
                        "{},{},{},{}",
                        t + 1,
                        stations.ids()[s],
                        grid.cell_ids()[c],
                        v
                    )?;
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Observations: t,station_id,value,variance (absent rows are missing slots)

pub fn load_observations(
    path: &Path,
    stations: &StationSet,
    n_time: usize,
) -> Result<ObservationSet> {
    let raw = read_csv(path, "observations")?;
    raw.expect_headers(&["t", "station_id", "value", "variance"])?;
    let mut records = Vec::with_capacity(raw.rows.len());
    for row in &raw.rows {
        let t = raw.index_1based(row, 0, n_time)?;
        let sid = raw.field(row, 1)?.trim();
        let station = stations
            .index_of(sid)
            .ok_or_else(|| raw.err(Some(row.0), format!("unknown station id '{sid}'")))?;
        let value = raw.finite_f64(row, 2)?;
        let variance = raw.finite_f64(row, 3)?;
        if !(variance > 0.0) {
            return Err(raw.err(Some(row.0), format!("variance {variance} must be positive")));
        }
        records.push(ObsRecord {
            t,
            station,
            value,
            variance,
        });
    }
    ObservationSet::new(n_time, stations.len(), records)
        .map_err(|e| FluxError::format(path, None, e.to_string()))
}

pub fn write_observations(
    obs: &ObservationSet,
    stations: &StationSet,
    path: &Path,
) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "{}", schema_line("observations"))?;
    writeln!(f, "t,station_id,value,variance")?;
    for r in obs.records() {
        writeln!(
            f,
            "{},{},{},{}",
            r.t + 1,
            stations.ids()[r.station],
            r.value,
            r.variance
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Inventory: cell_id,flux (every grid cell exactly once)

pub fn load_inventory(path: &Path, grid: &SpatialGrid) -> Result<DVector<f64>> {
    let raw = read_csv(path, "inventory")?;
    raw.expect_headers(&["cell_id", "flux"])?;
    let mut values = vec![None; grid.n_cells()];
    for row in &raw.rows {
        let cid = raw.field(row, 0)?.trim();
        let c = grid
            .index_of(cid)
            .ok_or_else(|| raw.err(Some(row.0), format!("unknown cell id '{cid}'")))?;
        let v = raw.finite_f64(row, 1)?;
        if !(v > 0.0) {
            return Err(raw.err(
                Some(row.0),
                format!("inventory flux {v} must be strictly positive"),
            ));
        }
        if values[c].replace(v).is_some() {
            return Err(raw.err(Some(row.0), format!("duplicate inventory entry for '{cid}'")));
        }
    }
    let mut out = DVector::zeros(grid.n_cells());
    for (i, v) in values.into_iter().enumerate() {
        out[i] = v.ok_or_else(|| {
            raw.err(
                None,
                format!("no inventory entry for cell '{}'", grid.cell_ids()[i]),
            )
        })?;
    }
    Ok(out)
}

pub fn write_inventory(flux: &DVector<f64>, grid: &SpatialGrid, path: &Path) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "{}", schema_line("inventory"))?;
    writeln!(f, "cell_id,flux")?;
    for (i, id) in grid.cell_ids().iter().enumerate() {
        writeln!(f, "{},{}", id, flux[i])?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Masks: mask_name,cell_id (masks may overlap)

pub fn load_masks(path: &Path, grid: &SpatialGrid) -> Result<Vec<RegionMask>> {
    let raw = read_csv(path, "masks")?;
    raw.expect_headers(&["mask_name", "cell_id"])?;
    let mut order = Vec::new();
    let mut masks: HashMap<String, Vec<String>> = HashMap::new();
    for row in &raw.rows {
        let name = raw.field(row, 0)?.trim().to_string();
        if name.is_empty() {
            return Err(raw.err(Some(row.0), "empty mask name"));
        }
        let cid = raw.field(row, 1)?.trim().to_string();
        if grid.index_of(&cid).is_none() {
            return Err(raw.err(Some(row.0), format!("unknown cell id '{cid}'")));
        }
        if !masks.contains_key(&name) {
            order.push(name.clone());
        }
        masks.entry(name).or_default().push(cid);
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let cells = masks.remove(&name).expect("mask collected above");
            RegionMask { name, cells }
        })
        .collect())
}

pub fn write_masks(masks: &[RegionMask], path: &Path) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "{}", schema_line("masks"))?;
    writeln!(f, "mask_name,cell_id")?;
    for mask in masks {
        for cell in &mask.cells {
            writeln!(f, "{},{}", mask.name, cell)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Posterior samples: flux_samples.csv (draw,cell_id,value) and
// param_samples.csv (draw,name,value). The draw index is 0-based and runs
// chain-major: chain 0's retained draws first, then chain 1's, and so on.

pub fn write_samples(samples: &PosteriorSamples, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = create(&dir.join("flux_samples.csv"))?;
    writeln!(f, "{}", schema_line("flux_samples"))?;
    writeln!(f, "draw,cell_id,value")?;
    for (d, draw) in samples.draws.iter().enumerate() {
        for (c, id) in samples.cell_ids.iter().enumerate() {
            writeln!(f, "{d},{id},{}", draw.y1[c])?;
        }
    }
    drop(f);

    let mut f = create(&dir.join("param_samples.csv"))?;
    writeln!(f, "{}", schema_line("param_samples"))?;
    writeln!(f, "draw,name,value")?;
    for (d, draw) in samples.draws.iter().enumerate() {
        writeln!(f, "{d},tau2,{}", draw.params.tau2)?;
        writeln!(f, "{d},a,{}", draw.params.ar_coeff)?;
        writeln!(f, "{d},d,{}", draw.params.length)?;
        if let Some(v) = draw.params.theta11 {
            writeln!(f, "{d},theta11,{v}")?;
        }
        if let Some(v) = draw.params.theta12 {
            writeln!(f, "{d},theta12,{v}")?;
        }
        if let Some(v) = draw.params.lambda {
            writeln!(f, "{d},lambda,{v}")?;
        }
    }
    Ok(())
}

/// Reload written samples for scoring. Chain labels are not stored on
/// disk; the draw index preserves chain-major order. The variant is
/// inferred from which parameter columns are present.
pub fn load_samples(dir: &Path) -> Result<PosteriorSamples> {
    let flux_path = dir.join("flux_samples.csv");
    let raw = read_csv(&flux_path, "flux_samples")?;
    raw.expect_headers(&["draw", "cell_id", "value"])?;
    if raw.rows.is_empty() {
        return Err(raw.err(None, "no flux draws"));
    }

    let mut cell_ids: Vec<String> = Vec::new();
    let mut flux: Vec<Vec<f64>> = Vec::new();
    for row in &raw.rows {
        let d: usize = raw.field(row, 0)?.trim().parse().map_err(|_| {
            raw.err(Some(row.0), "draw index is not a non-negative integer")
        })?;
        let cid = raw.field(row, 1)?.trim().to_string();
        let v = raw.finite_f64(row, 2)?;
        if d == flux.len() {
            flux.push(Vec::new());
        } else if d > flux.len() {
            return Err(raw.err(Some(row.0), format!("draw index {d} out of order")));
        }
        if d == 0 {
            cell_ids.push(cid.clone());
        }
        let expected = cell_ids.get(flux[d].len()).cloned();
        if expected.as_deref() != Some(cid.as_str()) {
            return Err(raw.err(
                Some(row.0),
                format!(
                    "cell id '{cid}' out of order (expected '{}')",
                    expected.unwrap_or_default()
                ),
            ));
        }
        flux[d].push(v);
    }
    let n_cells = cell_ids.len();
    for (d, y) in flux.iter().enumerate() {
        if y.len() != n_cells {
            return Err(raw.err(
                None,
                format!("draw {d} has {} cells, expected {n_cells}", y.len()),
            ));
        }
    }

    let param_path = dir.join("param_samples.csv");
    let raw_p = read_csv(&param_path, "param_samples")?;
    raw_p.expect_headers(&["draw", "name", "value"])?;
    let mut params: Vec<HashMap<String, f64>> = vec![HashMap::new(); flux.len()];
    for row in &raw_p.rows {
        let d: usize = raw_p.field(row, 0)?.trim().parse().map_err(|_| {
            raw_p.err(Some(row.0), "draw index is not a non-negative integer")
        })?;
        if d >= params.len() {
            return Err(raw_p.err(
                Some(row.0),
                format!("draw index {d} beyond the {} flux draws", params.len()),
            ));
        }
        let name = raw_p.field(row, 1)?.trim().to_string();
        if !["tau2", "a", "d", "theta11", "theta12", "lambda"].contains(&name.as_str()) {
            return Err(raw_p.err(Some(row.0), format!("unknown parameter '{name}'")));
        }
        let v = raw_p.finite_f64(row, 2)?;
        if params[d].insert(name.clone(), v).is_some() {
            return Err(raw_p.err(
                Some(row.0),
                format!("duplicate parameter '{name}' for draw {d}"),
            ));
        }
    }

    let has_theta = params.first().is_some_and(|p| p.contains_key("theta11"));
    let has_lambda = params.first().is_some_and(|p| p.contains_key("lambda"));
    let variant = ModelVariant::from_id(match (has_theta, has_lambda) {
        (true, true) => 1,
        (true, false) => 2,
        (false, true) => 4,
        (false, false) => 5,
    })
    .expect("static variant ids are valid");

    let mut draws = Vec::with_capacity(flux.len());
    for (d, y) in flux.into_iter().enumerate() {
        let get = |name: &str| -> Result<f64> {
            params[d].get(name).copied().ok_or_else(|| {
                FluxError::format(
                    param_path.clone(),
                    None,
                    format!("draw {d} is missing parameter '{name}'"),
                )
            })
        };
        let param_draw = ParamDraw {
            tau2: get("tau2")?,
            ar_coeff: get("a")?,
            length: get("d")?,
            theta11: params[d].get("theta11").copied(),
            theta12: params[d].get("theta12").copied(),
            lambda: params[d].get("lambda").copied(),
        };
        draws.push(Draw {
            chain: 0,
            iteration: d + 1,
            y1: DVector::from_vec(y),
            params: param_draw,
        });
    }
    Ok(PosteriorSamples {
        cell_ids,
        variant,
        draws,
        diagnostics: Vec::<ChainDiagnostics>::new(),
    })
}

/// Station list: station_id,lon,lat.
pub fn load_stations(path: &Path) -> Result<StationSet> {
    let raw = read_csv(path, "stations")?;
    raw.expect_headers(&["station_id", "lon", "lat"])?;
    let mut ids = Vec::with_capacity(raw.rows.len());
    let mut coords = Vec::with_capacity(raw.rows.len());
    for row in &raw.rows {
        let id = raw.field(row, 0)?.trim().to_string();
        if id.is_empty() {
            return Err(raw.err(Some(row.0), "empty station id"));
        }
        ids.push(id);
        coords.push([raw.finite_f64(row, 1)?, raw.finite_f64(row, 2)?]);
    }
    StationSet::new(ids, coords).map_err(|e| FluxError::format(path, None, e.to_string()))
}

pub fn write_stations(stations: &StationSet, path: &Path) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "{}", schema_line("stations"))?;
    writeln!(f, "station_id,lon,lat")?;
    for (id, c) in stations.ids().iter().zip(stations.coords()) {
        writeln!(f, "{},{},{}", id, c[0], c[1])?;
    }
    Ok(())
}

/// True mole fractions on the full station-time layout: t,station_id,value.
pub fn write_molefractions(
    y2: &DMatrix<f64>,
    stations: &StationSet,
    path: &Path,
) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "{}", schema_line("molefractions"))?;
    writeln!(f, "t,station_id,value")?;
    for t in 0..y2.nrows() {
        for (s, id) in stations.ids().iter().enumerate() {
            writeln!(f, "{},{},{}", t + 1, id, y2[(t, s)])?;
        }
    }
    Ok(())
}

pub fn load_molefractions(
    path: &Path,
    stations: &StationSet,
    n_time: usize,
) -> Result<DMatrix<f64>> {
    let raw = read_csv(path, "molefractions")?;
    raw.expect_headers(&["t", "station_id", "value"])?;
    let mut out = DMatrix::from_element(n_time, stations.len(), f64::NAN);
    for row in &raw.rows {
        let t = raw.index_1based(row, 0, n_time)?;
        let sid = raw.field(row, 1)?.trim();
        let s = stations
            .index_of(sid)
            .ok_or_else(|| raw.err(Some(row.0), format!("unknown station id '{sid}'")))?;
        out[(t, s)] = raw.finite_f64(row, 2)?;
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(raw.err(None, "mole-fraction table does not cover every slot"));
    }
    Ok(out)
}

/// Per-draw mole-fraction samples at held-out slots:
/// draw,t,station_id,value.
pub fn write_molefraction_samples(
    draws: &DMatrix<f64>,
    slots: &[(usize, usize)],
    stations: &StationSet,
    path: &Path,
) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "{}", schema_line("mf_samples"))?;
    writeln!(f, "draw,t,station_id,value")?;
    for d in 0..draws.nrows() {
        for (j, &(t, s)) in slots.iter().enumerate() {
            writeln!(f, "{d},{},{},{}", t + 1, stations.ids()[s], draws[(d, j)])?;
        }
    }
    Ok(())
}

/// Returns the draw matrix and the slots it covers.
pub fn load_molefraction_samples(
    path: &Path,
    stations: &StationSet,
) -> Result<(DMatrix<f64>, Vec<(usize, usize)>)> {
    let raw = read_csv(path, "mf_samples")?;
    raw.expect_headers(&["draw", "t", "station_id", "value"])?;
    if raw.rows.is_empty() {
        return Err(raw.err(None, "no mole-fraction draws"));
    }
    let mut slots: Vec<(usize, usize)> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for row in &raw.rows {
        let d: usize = raw.field(row, 0)?.trim().parse().map_err(|_| {
            raw.err(Some(row.0), "draw index is not a non-negative integer")
        })?;
        let t: usize = raw.field(row, 1)?.trim().parse::<usize>().map_err(|_| {
            raw.err(Some(row.0), "time index is not a positive integer")
        })?;
        if t == 0 {
            return Err(raw.err(Some(row.0), "time indices are 1-based"));
        }
        let sid = raw.field(row, 2)?.trim();
        let s = stations
            .index_of(sid)
            .ok_or_else(|| raw.err(Some(row.0), format!("unknown station id '{sid}'")))?;
        let v = raw.finite_f64(row, 3)?;
        if d == values.len() {
            values.push(Vec::new());
        } else if d > values.len() {
            return Err(raw.err(Some(row.0), format!("draw index {d} out of order")));
        }
        if d == 0 {
            slots.push((t - 1, s));
        } else {
            let expected = slots.get(values[d].len()).copied();
            if expected != Some((t - 1, s)) {
                return Err(raw.err(Some(row.0), "slot order differs between draws"));
            }
        }
        values[d].push(v);
    }
    let n_slots = slots.len();
    for (d, v) in values.iter().enumerate() {
        if v.len() != n_slots {
            return Err(raw.err(
                None,
                format!("draw {d} covers {} slots, expected {n_slots}", v.len()),
            ));
        }
    }
    let mat = DMatrix::from_fn(values.len(), n_slots, |d, j| values[d][j]);
    Ok((mat, slots))
}
