//! Run configuration: an INI-style `key = value` file with `[section]`
//! headers, shared by the `simulate` and `infer` commands.
//!
//! Every key is validated against the published schema below; unknown
//! sections or keys are errors (a misspelled key must never silently fall
//! back to a default). `#` starts a comment. See the crate README for a
//! worked example.
//!
//! ```text
//! [run]           seed, output, variant (1..6, default 1)
//! [grid]          file | nx, ny, lon0, lat0, dlon, dlat [, split_lat]
//! [stations]      file | count
//! [sensitivities] t, file | target_signal, footprint_width,
//!                 wind_persistence, reference_flux
//! [truth]         file | theta11, theta12, tau1, lambda, beta
//! [discrepancy]   tau2, a, d
//! [observations]  variance, missing_fraction
//! [inventory]     source (truth|file|simulate), file,
//!                 target_mean, target_variance
//! [inputs]        dir | grid, stations, sensitivities, observations,
//!                 inventory, t
//! [mcmc]          chains, iterations, burn_in, thin, step_size,
//!                 adapt, leapfrog_min, leapfrog_max, threads
//! [priors]        ln_tau2_inv, a, ln_d, theta11, theta12, lambda
//!                 (each "lo,hi")
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::model::PriorBounds;
use crate::{FluxError, Result};

/// Published config schema: section name, then allowed keys.
pub const CONFIG_SCHEMA: &[(&str, &[&str])] = &[
    ("run", &["seed", "output", "variant"]),
    (
        "grid",
        &["file", "nx", "ny", "lon0", "lat0", "dlon", "dlat", "split_lat"],
    ),
    ("stations", &["file", "count"]),
    (
        "sensitivities",
        &[
            "t",
            "file",
            "target_signal",
            "footprint_width",
            "wind_persistence",
            "reference_flux",
        ],
    ),
    (
        "truth",
        &["file", "theta11", "theta12", "tau1", "lambda", "beta"],
    ),
    ("discrepancy", &["tau2", "a", "d"]),
    ("observations", &["variance", "missing_fraction"]),
    (
        "inventory",
        &["source", "file", "target_mean", "target_variance"],
    ),
    (
        "inputs",
        &["dir", "grid", "stations", "sensitivities", "observations", "inventory", "t"],
    ),
    (
        "mcmc",
        &[
            "chains",
            "iterations",
            "burn_in",
            "thin",
            "step_size",
            "adapt",
            "leapfrog_min",
            "leapfrog_max",
            "threads",
        ],
    ),
    (
        "priors",
        &["ln_tau2_inv", "a", "ln_d", "theta11", "theta12", "lambda"],
    ),
];

pub const CONFIG_SCHEMA_VERSION: &str = "1";

/// Parsed `[section] key = value` file with line numbers for messages.
#[derive(Clone, Debug)]
pub struct ConfigFile {
    path: PathBuf,
    sections: HashMap<String, HashMap<String, (u64, String)>>,
}

impl ConfigFile {
    pub fn parse(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut sections: HashMap<String, HashMap<String, (u64, String)>> = HashMap::new();
        let mut current: Option<String> = None;
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i as u64 + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    FluxError::format(path, Some(line_no), "unterminated section header")
                })?;
                let name = name.trim().to_lowercase();
                if !CONFIG_SCHEMA.iter().any(|(s, _)| *s == name) {
                    return Err(FluxError::format(
                        path,
                        Some(line_no),
                        format!("unknown section '[{name}]'"),
                    ));
                }
                sections.entry(name.clone()).or_default();
                current = Some(name);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                FluxError::format(path, Some(line_no), format!("expected 'key = value', got '{line}'"))
            })?;
            let section = current.as_ref().ok_or_else(|| {
                FluxError::format(path, Some(line_no), "key outside any [section]")
            })?;
            let key = key.trim().to_lowercase();
            let allowed = CONFIG_SCHEMA
                .iter()
                .find(|(s, _)| s == section)
                .map(|(_, keys)| *keys)
                .expect("section validated at header");
            if !allowed.contains(&key.as_str()) {
                return Err(FluxError::format(
                    path,
                    Some(line_no),
                    format!(
                        "unknown key '{key}' in [{section}]; allowed: {}",
                        allowed.join(", ")
                    ),
                ));
            }
            let entry = sections.get_mut(section).expect("section inserted at header");
            if entry
                .insert(key.clone(), (line_no, value.trim().to_string()))
                .is_some()
            {
                return Err(FluxError::format(
                    path,
                    Some(line_no),
                    format!("duplicate key '{key}' in [{section}]"),
                ));
            }
        }
        Ok(ConfigFile { path: path.to_path_buf(), sections })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|(_, v)| v.as_str())
    }

    fn err(&self, section: &str, key: &str, msg: impl std::fmt::Display) -> FluxError {
        let line = self
            .sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|(l, _)| *l);
        FluxError::format(&self.path, line, format!("[{section}] {key}: {msg}"))
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key).ok_or_else(|| {
            FluxError::Config(format!(
                "{}: missing required key '{key}' in [{section}]",
                self.path.display()
            ))
        })
    }

    pub fn require_f64(&self, section: &str, key: &str) -> Result<f64> {
        let raw = self.require(section, key)?;
        let v: f64 = raw
            .parse()
            .map_err(|_| self.err(section, key, format!("'{raw}' is not a number")))?;
        if !v.is_finite() {
            return Err(self.err(section, key, "must be finite"));
        }
        Ok(v)
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<Option<f64>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(_) => self.require_f64(section, key).map(Some),
        }
    }

    pub fn require_usize(&self, section: &str, key: &str) -> Result<usize> {
        let raw = self.require(section, key)?;
        raw.parse()
            .map_err(|_| self.err(section, key, format!("'{raw}' is not a non-negative integer")))
    }

    pub fn get_usize(&self, section: &str, key: &str) -> Result<Option<usize>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(_) => self.require_usize(section, key).map(Some),
        }
    }

    pub fn require_u64(&self, section: &str, key: &str) -> Result<u64> {
        let raw = self.require(section, key)?;
        raw.parse()
            .map_err(|_| self.err(section, key, format!("'{raw}' is not a non-negative integer")))
    }

    pub fn require_path(&self, section: &str, key: &str) -> Result<PathBuf> {
        let raw = self.require(section, key)?;
        // Paths are relative to the config file's directory.
        let p = PathBuf::from(raw);
        if p.is_absolute() {
            Ok(p)
        } else {
            Ok(self
                .path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(p))
        }
    }

    pub fn get_path(&self, section: &str, key: &str) -> Result<Option<PathBuf>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(_) => self.require_path(section, key).map(Some),
        }
    }

    /// A `lo,hi` pair.
    pub fn get_bounds(&self, section: &str, key: &str) -> Result<Option<(f64, f64)>> {
        let Some(raw) = self.get(section, key) else {
            return Ok(None);
        };
        let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(self.err(section, key, format!("expected 'lo,hi', got '{raw}'")));
        }
        let lo: f64 = parts[0]
            .parse()
            .map_err(|_| self.err(section, key, format!("'{}' is not a number", parts[0])))?;
        let hi: f64 = parts[1]
            .parse()
            .map_err(|_| self.err(section, key, format!("'{}' is not a number", parts[1])))?;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(self.err(section, key, format!("bounds ({lo}, {hi}) need lo < hi")));
        }
        Ok(Some((lo, hi)))
    }

    /// Comma-separated float list.
    pub fn require_f64_list(&self, section: &str, key: &str) -> Result<Vec<f64>> {
        let raw = self.require(section, key)?;
        raw.split(',')
            .map(|part| {
                let part = part.trim();
                part.parse::<f64>()
                    .map_err(|_| self.err(section, key, format!("'{part}' is not a number")))
            })
            .collect()
    }

    /// Prior bounds with the standard defaults for anything unspecified.
    pub fn prior_bounds(&self) -> Result<PriorBounds> {
        let mut bounds = PriorBounds::default();
        if let Some(v) = self.get_bounds("priors", "ln_tau2_inv")? {
            bounds.ln_tau2_inv = v;
        }
        if let Some(v) = self.get_bounds("priors", "a")? {
            bounds.ar_coeff = v;
        }
        if let Some(v) = self.get_bounds("priors", "ln_d")? {
            bounds.ln_length = v;
        }
        if let Some(v) = self.get_bounds("priors", "theta11")? {
            bounds.theta11 = v;
        }
        if let Some(v) = self.get_bounds("priors", "theta12")? {
            bounds.theta12 = v;
        }
        if let Some(v) = self.get_bounds("priors", "lambda")? {
            bounds.lambda = v;
        }
        bounds.validate()?;
        Ok(bounds)
    }

    /// Canonical text of the resolved configuration: sections and keys in
    /// schema order, for manifests.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (section, keys) in CONFIG_SCHEMA {
            let Some(entries) = self.sections.get(*section) else {
                continue;
            };
            out.push_str(&format!("[{section}]\n"));
            for key in *keys {
                if let Some((_, value)) = entries.get(*key) {
                    out.push_str(&format!("{key} = {value}\n"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// 64-bit FNV-1a, used to stamp manifests and summaries with a content
/// hash of the inputs they were produced from.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
