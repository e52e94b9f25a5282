//! Experiment report: schema-versioned JSON with one cell per
//! (mode, seed), self-describing through an embedded configuration echo.

use super::{ExperimentSpec, HarnessError};
use crate::control::ControllerMode;
use crate::estim::SensitivityEstimate;
use crate::sim::{Scenario, Simulator};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub case_file: String,
    pub scenario_file: String,
    pub modes: Vec<ControllerMode>,
    pub seeds: Vec<u64>,
    /// Echo of the scenario configuration the runs used.
    pub scenario: Scenario,
    pub cells: Vec<CellReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub mode: ControllerMode,
    pub seed: u64,
    pub lambda: f64,
    pub action_count: usize,
    pub skipped_ticks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller_disabled: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimation: Option<EstimationReport>,
    pub max_solve_seconds: f64,
    pub trajectory_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationReport {
    pub log_residual: f64,
    pub covariance_condition: f64,
    pub stable: bool,
    /// Worst relative time-constant errors against the case truth, when
    /// the estimated buses carry known parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_theta_max_rel_err: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_v_max_rel_err: Option<f64>,
    pub seconds: f64,
}

pub fn mode_slug(mode: ControllerMode) -> &'static str {
    match mode {
        ControllerMode::None => "none",
        ControllerMode::ModelFree => "model_free",
        ControllerMode::ModelBased => "model_based",
        ControllerMode::ModelBasedStale => "model_based_stale",
    }
}

/// Compares estimated time constants against the case truth.
pub fn estimation_summary(
    est: &SensitivityEstimate,
    sim: &Simulator,
    seconds: f64,
) -> EstimationReport {
    let mut max_t = 0.0f64;
    let mut max_v = 0.0f64;
    let mut known = true;
    for (k, id) in est.bus_ids.iter().enumerate() {
        let Some(pos) = sim.net.index.pos.get(id) else {
            known = false;
            break;
        };
        let Some(load) = sim.net.case.buses[*pos].load.as_ref() else {
            known = false;
            break;
        };
        max_t = max_t.max((est.t_theta[k] - load.tau_theta).abs() / load.tau_theta);
        max_v = max_v.max((est.t_v[k] - load.tau_v).abs() / load.tau_v);
    }
    EstimationReport {
        log_residual: est.log_residual,
        covariance_condition: est.condition,
        stable: est.stable,
        tau_theta_max_rel_err: known.then_some(max_t),
        tau_v_max_rel_err: known.then_some(max_v),
        seconds,
    }
}

impl RunReport {
    pub fn new(spec: &ExperimentSpec, scenario: &Scenario) -> Self {
        RunReport {
            schema_version: SCHEMA_VERSION,
            case_file: spec.case_file.display().to_string(),
            scenario_file: spec.scenario_file.display().to_string(),
            modes: spec.modes.clone(),
            seeds: spec.seeds.clone(),
            scenario: scenario.clone(),
            cells: Vec::new(),
        }
    }

    pub fn push_cell(&mut self, cell: CellReport) {
        self.cells.push(cell);
    }

    pub fn push_failed(&mut self, mode: ControllerMode, seed: u64, error: String) {
        self.cells.push(CellReport {
            mode,
            seed,
            lambda: f64::NAN,
            action_count: 0,
            skipped_ticks: 0,
            controller_disabled: None,
            estimation: None,
            max_solve_seconds: 0.0,
            trajectory_file: String::new(),
            error: Some(error),
        });
    }

    pub fn cell(&self, mode: ControllerMode, seed: u64) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.seed == seed)
    }

    /// Mean lambda over the seeds of one mode, skipping failed cells.
    pub fn mean_lambda(&self, mode: ControllerMode) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.mode == mode && c.error.is_none())
            .map(|c| c.lambda)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_json(&self) -> Result<String, HarnessError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let report: RunReport = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, HarnessError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Structural checks every emitted report must satisfy.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Experiment(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        for cell in &self.cells {
            if cell.error.is_none() {
                if !(cell.lambda >= 0.0) {
                    return Err(HarnessError::Experiment(format!(
                        "cell {}/{} has invalid lambda {}",
                        mode_slug(cell.mode),
                        cell.seed,
                        cell.lambda
                    )));
                }
                if cell.trajectory_file.is_empty() {
                    return Err(HarnessError::Experiment(
                        "successful cell lacks a trajectory file".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}
