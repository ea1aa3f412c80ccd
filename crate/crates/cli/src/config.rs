//! Experiment configuration, read from a TOML file.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! d = 3
//! alpha = 2.0
//! mu = 10.0
//! drift = [0.0, 0.0, 0.0]
//!
//! [simulation]
//! dt_max = 1e-4
//! dt_rule = "radius_scaled"
//! kappa = 1e-3
//!
//! [experiment]
//! delta = 0.5
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Unknown keys are rejected. Keys an experiment needs but does not find are
//! reported by their dotted name.
//!
//! Required `[experiment]` keys (others optional):
//!
//! - `check-conditions`: none (`model.mu` only)
//! - `simulate-orbm`: `delta`
//! - `exit-time`: `delta`, `paths`
//! - `survival-bound`: `delta`, `beta`, `paths`
//! - `hitting-uniqueness`: `delta`, `levels`, `paths`
//! - `ergodic-demo`: `kernel_files` or `demo`
//! - `prelimit`: `r_list`, `t_end`
//! - `compare`: `r_list`, `t_end`, `delta`

use std::path::Path;

use nalgebra::DMatrix;
use orbm_core::cone::ConeParams;
use orbm_core::generator::DiffusionParams;
use orbm_core::prelimit::NetworkTopology;
use orbm_core::sim::{DtRule, SimConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub model: Option<ModelConfig>,
    pub simulation: Option<SimulationConfig>,
    pub experiment: Option<ExperimentBlock>,
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub mu: Option<f64>,
    pub drift: Option<Vec<f64>>,
    pub topology: Option<TopologyConfig>,
}

fn default_d() -> usize {
    3
}

fn default_alpha() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    /// Rows are resources, columns routes.
    pub incidence: Vec<Vec<f64>>,
    pub capacities: Vec<f64>,
    pub weights: Vec<f64>,
    pub arrival: Vec<f64>,
    pub size_rates: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_dt_max")]
    pub dt_max: f64,
    /// `"fixed"` or `"radius_scaled"`.
    #[serde(default = "default_dt_rule")]
    pub dt_rule: String,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_dt_min")]
    pub dt_min: f64,
    #[serde(default = "default_origin_eps")]
    pub origin_eps: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_true")]
    pub interpolate_crossings: bool,
}

fn default_dt_max() -> f64 {
    1e-4
}
fn default_dt_rule() -> String {
    "fixed".into()
}
fn default_kappa() -> f64 {
    1e-3
}
fn default_dt_min() -> f64 {
    1e-12
}
fn default_origin_eps() -> f64 {
    1e-5
}
fn default_max_steps() -> usize {
    10_000_000
}
fn default_true() -> bool {
    true
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            dt_max: default_dt_max(),
            dt_rule: default_dt_rule(),
            kappa: default_kappa(),
            dt_min: default_dt_min(),
            origin_eps: default_origin_eps(),
            max_steps: default_max_steps(),
            interpolate_crossings: true,
        }
    }
}

/// Subcommand-specific settings; which ones are required depends on the
/// subcommand.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    pub delta: Option<f64>,
    pub levels: Option<usize>,
    pub cells: Option<usize>,
    pub paths: Option<usize>,
    pub beta: Option<f64>,
    pub eps: Option<f64>,
    /// Starting point in Cartesian coordinates.
    pub start: Option<Vec<f64>>,
    /// Starting direction in dual coordinates.
    pub direction: Option<Vec<f64>>,
    /// Innermost cells carrying the point-mass initial distributions.
    pub nu_cells: Option<Vec<usize>>,
    pub bootstrap: Option<usize>,
    pub report_tol: Option<f64>,
    pub r_list: Option<Vec<f64>>,
    pub t_end: Option<f64>,
    pub replications: Option<usize>,
    pub grid_points: Option<usize>,
    pub collar: Option<f64>,
    pub max_events: Option<usize>,
    pub horizon: Option<usize>,
    pub tol: Option<f64>,
    pub steps: Option<usize>,
    /// Kernel CSV files `Q_1..Q_n`, relative to the config file.
    pub kernel_files: Option<Vec<String>>,
    /// Built-in kernel sequence: `"two_state"` or `"identity"`.
    pub demo: Option<String>,
    pub samples_per_face: Option<usize>,
    pub radii: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<String>,
    #[serde(default)]
    pub path_csv: bool,
}

pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse(&text)
}

pub fn req<T: Clone>(v: &Option<T>, key: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
}

impl ExperimentConfig {
    pub fn model(&self) -> Result<&ModelConfig, CliError> {
        self.model
            .as_ref()
            .ok_or_else(|| CliError::Config("missing required section `[model]`".into()))
    }

    pub fn experiment(&self) -> ExperimentBlock {
        self.experiment.clone().unwrap_or_default()
    }

    pub fn cone(&self) -> Result<ConeParams, CliError> {
        let m = self.model()?;
        let mu = req(&m.mu, "model.mu")?;
        ConeParams::new(m.d, m.alpha, mu).map_err(|e| CliError::Config(format!("model: {e}")))
    }

    pub fn drift(&self) -> Result<Vec<f64>, CliError> {
        let m = self.model()?;
        let b = m.drift.clone().unwrap_or_else(|| vec![0.0; m.d]);
        if b.len() != m.d {
            return Err(CliError::Config(format!("model.drift must have {} entries", m.d)));
        }
        Ok(b)
    }

    /// Example-network diffusion, or the one induced by `[model.topology]`.
    pub fn diffusion(&self) -> Result<DiffusionParams, CliError> {
        let m = self.model()?;
        let b = self.drift()?;
        let r = match &m.topology {
            Some(_) => {
                let t = self.topology()?;
                let s = t.sigma().map_err(|e| CliError::Config(format!("model.topology: {e}")))?;
                DiffusionParams::new(b, s)
            }
            None => DiffusionParams::example(m.d, req(&m.mu, "model.mu")?, b),
        };
        r.map_err(|e| CliError::Config(format!("model: {e}")))
    }

    pub fn topology(&self) -> Result<NetworkTopology, CliError> {
        let m = self.model()?;
        let t = match &m.topology {
            Some(tc) => {
                let d = tc.incidence.len();
                let cols = tc.incidence.first().map(|r| r.len()).unwrap_or(0);
                if d == 0 || tc.incidence.iter().any(|r| r.len() != cols) {
                    return Err(CliError::Config("model.topology.incidence must be a nonempty rectangular array".into()));
                }
                NetworkTopology {
                    incidence: DMatrix::from_fn(d, cols, |j, i| tc.incidence[j][i]),
                    capacities: tc.capacities.clone(),
                    weights: tc.weights.clone(),
                    arrival: tc.arrival.clone(),
                    size_rates: tc.size_rates.clone(),
                    alpha: m.alpha,
                }
            }
            None => NetworkTopology::example(m.d, req(&m.mu, "model.mu")?, m.alpha),
        };
        t.validate().map_err(|e| CliError::Config(format!("model.topology: {e}")))?;
        Ok(t)
    }

    pub fn sim(&self, seed: u64) -> Result<SimConfig, CliError> {
        let s = self.simulation.clone().unwrap_or_default();
        let dt_rule = match s.dt_rule.as_str() {
            "fixed" => DtRule::Fixed,
            "radius_scaled" => DtRule::RadiusScaled {
                kappa: s.kappa,
                dt_min: s.dt_min,
            },
            other => {
                return Err(CliError::Config(format!(
                    "simulation.dt_rule must be \"fixed\" or \"radius_scaled\", got {other:?}"
                )))
            }
        };
        let cfg = SimConfig {
            dt_max: s.dt_max,
            dt_rule,
            origin_eps: s.origin_eps,
            seed,
            max_steps: s.max_steps,
            interpolate_crossings: s.interpolate_crossings,
            record_path: false,
        };
        cfg.validate().map_err(|e| CliError::Config(format!("simulation: {e}")))?;
        Ok(cfg)
    }
}
