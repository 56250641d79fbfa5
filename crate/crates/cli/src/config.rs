//! Per-subcommand run configurations, read from JSON.
//!
//! Keys named `_note` are comments and are removed before parsing; any other
//! unknown key is an error. Every config carries a mandatory `seed`.

use std::fs;
use std::path::{Path, PathBuf};

use pilotwave::cmb::{PrimordialSpectrum, TransferSpec};
use pilotwave::cosmofield::{EvolveConfig, Expansion, InitialRho};
use pilotwave::integrator::IntegratorConfig;
use pilotwave::relaxation::{GridSpec, InitialDensity};
use pilotwave::wavefield::{Superposition, Wave1d};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

/// Reads `path`, drops `_note` keys at any depth and deserializes.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    strip_notes(&mut value);
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn strip_notes(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("_note");
            map.values_mut().for_each(strip_notes);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_notes),
        _ => {}
    }
}

fn config_error(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSpec {
    /// All `side × side` modes `(m, n)` with `m, n < side`, equal weights and
    /// phases drawn from the run seed.
    RandomPhase { side: u32 },
    Explicit { modes: Vec<[u32; 2]>, coeffs: Vec<[f64; 2]> },
}

impl StateSpec {
    pub fn build(&self, seed: u64) -> Result<Superposition, CliError> {
        match self {
            StateSpec::RandomPhase { side } => {
                if *side == 0 {
                    return Err(CliError::Config("random_phase side must be at least 1".into()));
                }
                Superposition::equal_weight_random_phase(Superposition::square_modes(*side), seed).map_err(config_error)
            }
            StateSpec::Explicit { modes, coeffs } => {
                let repr = serde_json::json!({ "modes": modes, "coeffs": coeffs });
                serde_json::from_value(repr).map_err(config_error)
            }
        }
    }
}

fn default_initial_density() -> InitialDensity {
    InitialDensity::Gaussian { width: 1.0 }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub state: StateSpec,
    #[serde(default = "default_initial_density")]
    pub initial_density: InitialDensity,
    pub times: Vec<f64>,
    /// The first grid is the reference; the others give the error estimate.
    pub grids: Vec<GridSpec>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    /// Write the reference-grid densities at every time.
    #[serde(default = "yes")]
    pub snapshots: bool,
}

impl RelaxConfig {
    pub fn validate(&self) -> Result<Superposition, CliError> {
        let state = self.state.build(self.seed)?;
        if let InitialDensity::Gaussian { width } = self.initial_density {
            if !(width > 0.0 && width.is_finite()) {
                return Err(CliError::Config(format!("initial density width must be positive, got {width}")));
            }
        }
        if self.times.is_empty() || self.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(CliError::Config("times must be a non-empty list of finite non-negative values".into()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CliError::Config("times must be strictly increasing".into()));
        }
        if self.grids.len() < 2 {
            return Err(CliError::Config("at least two grids are needed for error estimates".into()));
        }
        for g in &self.grids {
            g.validate().map_err(config_error)?;
        }
        self.integrator.validate().map_err(CliError::Config)?;
        Ok(state)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// An `hcurve.csv` with columns `t, hbar, err`.
    pub input: PathBuf,
}

fn default_side() -> u32 {
    4
}
fn one() -> f64 {
    1.0
}
fn default_t_f() -> f64 {
    101.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosmoScanConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Levels per axis of the random-phase initial superposition.
    #[serde(default = "default_side")]
    pub side: u32,
    #[serde(default)]
    pub initial_rho: InitialRho,
    #[serde(default = "one")]
    pub a_i: f64,
    #[serde(default = "one")]
    pub t_i: f64,
    #[serde(default = "default_t_f")]
    pub t_f: f64,
    #[serde(default)]
    pub expansion: Expansion,
    /// Physical wavelength over Hubble radius at `t_i`, one run per entry.
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub evolve: EvolveConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmbConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub spectrum: PrimordialSpectrum,
    pub transfer: TransferSpec,
    pub l_min: usize,
    pub l_max: usize,
}

fn default_ls() -> Vec<usize> {
    vec![2, 10, 100]
}
fn default_realizations() -> usize {
    10_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosmicVarianceConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_ls")]
    pub ls: Vec<usize>,
    #[serde(default = "default_realizations")]
    pub realizations: usize,
}

fn ground() -> Wave1d {
    Wave1d::eigenstate(0)
}
fn default_samples() -> usize {
    100_000
}
fn default_exponents() -> Vec<f64> {
    vec![2.0, 4.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NestingConfig {
    pub first: Wave1d,
    pub second: Wave1d,
    #[serde(default = "default_samples")]
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypicalityConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "ground")]
    pub psi: Wave1d,
    #[serde(default = "default_samples")]
    pub n: usize,
    #[serde(default = "default_exponents")]
    pub exponents: Vec<f64>,
    #[serde(default)]
    pub nesting: Option<NestingConfig>,
}
