use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use srhc_core::control::AnnulusSolutionMode;
use srhc_core::geometry::Metric;
use srhc_core::models::{omni_robot, single_integrator_2d, OmniParams};
use srhc_core::planner::PlannerConfig;
use srhc_core::sde::SdeModel;

use crate::error::{CliError, CliResult};

/// Run configuration, read from a TOML file. Unknown keys are rejected at
/// every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// World file, relative to the configuration file.
    pub world: PathBuf,
    /// Run directory, relative to the working directory. `--out` overrides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub planner: PlannerConfig,
    pub controller: ControllerConfig,
    pub execution: ExecutionConfig,
    #[serde(default)]
    pub field: FieldConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelName {
    #[serde(rename = "single_integrator_2d")]
    SingleIntegrator2d,
    #[serde(rename = "omni_robot")]
    OmniRobot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: ModelName,
    /// Diagonal entry of Σ. Defaults to 1 for the single integrator and 0.2
    /// for the omni robot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Omni wheel mounting angle δ (rad).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Omni center-to-wheel distance L (m).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wheel_base: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    Harmonic,
    PaperLinear,
    Field,
}

impl ControllerMode {
    pub fn closed_form(self) -> Option<AnnulusSolutionMode> {
        match self {
            ControllerMode::Harmonic => Some(AnnulusSolutionMode::Harmonic),
            ControllerMode::PaperLinear => Some(AnnulusSolutionMode::PaperLinear),
            ControllerMode::Field => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub mode: ControllerMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<f64>,
    #[serde(default)]
    pub recovery: bool,
    #[serde(default)]
    pub replan: bool,
}

fn default_runs() -> usize {
    1
}

fn default_horizons() -> usize {
    50
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionConfig {
    pub start: Vec<f64>,
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default = "default_horizons")]
    pub max_horizons: usize,
    /// Per-segment time cap in seconds; `10⁴ dt` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_time_cap: Option<f64>,
    /// Shorten integration steps near each domain's outer wall.
    #[serde(default = "yes")]
    pub boundary_refinement: bool,
    /// Write per-episode traces for the first this-many episodes only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_traces: Option<usize>,
}

fn default_paths() -> u64 {
    200
}

fn default_field_dt() -> f64 {
    0.01
}

fn default_paper_paths() -> u64 {
    500
}

fn default_paper_nodes() -> usize {
    41
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    /// Nodes per axis; 21 on every axis when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default = "default_paths")]
    pub n_paths: u64,
    #[serde(default = "default_field_dt")]
    pub dt: f64,
    /// Nodes per axis under `--paper-scale`.
    #[serde(default = "default_paper_nodes")]
    pub paper_nodes: usize,
    /// Paths per node under `--paper-scale`.
    #[serde(default = "default_paper_paths")]
    pub paper_paths: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            shape: None,
            n_paths: default_paths(),
            dt: default_field_dt(),
            paper_nodes: default_paper_nodes(),
            paper_paths: default_paper_paths(),
        }
    }
}

fn default_sweep_runs() -> usize {
    400
}

fn default_t_max() -> f64 {
    100.0
}

/// Success-probability sweep over start radii in one annulus centered at the
/// origin with goal radius `planner.epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub outer_radius: f64,
    pub radii: Vec<f64>,
    #[serde(default = "default_sweep_runs")]
    pub n_runs: usize,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
}

/// A catalog model with its state and input dimensions fixed.
pub enum Model {
    Planar(SdeModel<2, 2>),
    Omni(SdeModel<3, 3>),
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        match self.name {
            ModelName::SingleIntegrator2d => 2,
            ModelName::OmniRobot => 3,
        }
    }

    pub fn metric(&self) -> Metric {
        match self.name {
            ModelName::SingleIntegrator2d => Metric::Euclidean,
            ModelName::OmniRobot => Metric::Se2Embedded,
        }
    }

    pub fn build(&self) -> Model {
        match self.name {
            ModelName::SingleIntegrator2d => Model::Planar(single_integrator_2d(self.sigma.unwrap_or(1.0))),
            ModelName::OmniRobot => {
                let d = OmniParams::default();
                Model::Omni(omni_robot(&OmniParams {
                    delta: self.delta.unwrap_or(d.delta),
                    wheel_base: self.wheel_base.unwrap_or(d.wheel_base),
                    sigma: self.sigma.unwrap_or(d.sigma),
                }))
            }
        }
    }
}

fn positive(name: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let m = &self.model;
        if let Some(s) = m.sigma {
            positive("model.sigma", s)?;
        }
        if m.name == ModelName::SingleIntegrator2d && (m.delta.is_some() || m.wheel_base.is_some()) {
            return Err(CliError::config("model.delta and model.wheel_base apply to omni_robot only"));
        }
        if let Some(l) = m.wheel_base {
            positive("model.wheel_base", l)?;
        }
        self.planner.validate().map_err(|e| CliError::config(format!("planner: {e}")))?;
        let c = &self.controller;
        if let Some(u) = c.u_max {
            positive("controller.u_max", u)?;
        }
        if m.name == ModelName::OmniRobot && c.mode != ControllerMode::Field {
            return Err(CliError::config("omni_robot has no closed-form controller; set controller.mode = \"field\""));
        }
        let e = &self.execution;
        if e.start.len() != m.dim() {
            return Err(CliError::config(format!(
                "execution.start has {} entries, {} needs {}",
                e.start.len(),
                match m.name {
                    ModelName::SingleIntegrator2d => "single_integrator_2d",
                    ModelName::OmniRobot => "omni_robot",
                },
                m.dim()
            )));
        }
        positive("execution.dt", e.dt)?;
        if e.n_runs == 0 {
            return Err(CliError::config("execution.n_runs must be positive"));
        }
        if let Some(cap) = e.segment_time_cap {
            positive("execution.segment_time_cap", cap)?;
        }
        let f = &self.field;
        positive("field.dt", f.dt)?;
        if f.n_paths == 0 || f.paper_paths == 0 || f.paper_nodes < 2 {
            return Err(CliError::config(
                "field.n_paths, field.paper_paths must be positive and field.paper_nodes >= 2",
            ));
        }
        if let Some(shape) = &f.shape {
            if shape.len() != m.dim() || shape.iter().any(|&s| s < 2) {
                return Err(CliError::config(format!("field.shape needs {} entries of at least 2", m.dim())));
            }
        }
        if let Some(s) = &self.sweep {
            positive("sweep.outer_radius", s.outer_radius)?;
            positive("sweep.t_max", s.t_max)?;
            if s.n_runs == 0 || s.radii.is_empty() {
                return Err(CliError::config("sweep needs radii and a positive n_runs"));
            }
            let eps = self.planner.epsilon;
            if let Some(r) = s.radii.iter().find(|&&r| !(r > eps && r < s.outer_radius)) {
                return Err(CliError::config(format!("sweep radius {r} outside ({eps}, {})", s.outer_radius)));
            }
        }
        Ok(())
    }

    /// Grid shape and paths per node for field estimation.
    pub fn field_resolution(&self, paper_scale: bool) -> (Vec<usize>, u64) {
        let dim = self.model.dim();
        if paper_scale {
            (vec![self.field.paper_nodes; dim], self.field.paper_paths)
        } else {
            (self.field.shape.clone().unwrap_or_else(|| vec![21; dim]), self.field.n_paths)
        }
    }
}
