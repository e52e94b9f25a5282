//! Scenario description: run timing, events, noise, and the controller
//! and estimation settings consumed by the experiment harness.

use super::NoiseModel;
use crate::control::ControllerSettings;
use crate::net::BusId;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub duration_s: f64,
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
    /// Topology or load changes applied to the case before the run and
    /// before the estimation window (an already-changed grid).
    #[serde(default)]
    pub pre_events: Vec<EventKind>,
    /// Length of the ambient window collected for estimation.
    #[serde(default = "default_window")]
    pub estimation_window_s: f64,
    /// Optional short sub-window (seconds) for the time-constant
    /// regression; full window when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression_window_s: Option<f64>,
    /// Buses with PMUs installed; all dynamic load buses when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pmu_buses: Option<Vec<BusId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerSettings>,
}

fn default_dt() -> f64 {
    1.0 / 600.0
}
fn default_rate() -> f64 {
    60.0
}
fn default_window() -> f64 {
    300.0
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Time of the first disturbance event, if any.
    pub fn disturbance_time(&self) -> Option<f64> {
        self.events
            .iter()
            .filter(|e| {
                matches!(
                    e.kind,
                    EventKind::LoadStep { .. } | EventKind::LineTrip { .. }
                )
            })
            .map(|e| e.at_s)
            .fold(None, |acc, t| Some(acc.map_or(t, |a: f64| a.min(t))))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub at_s: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    LoadStep {
        buses: BusSelector,
        dp_frac: f64,
        dq_frac: f64,
    },
    LineTrip {
        from: BusId,
        to: BusId,
    },
    SetVref {
        bus: BusId,
        value: f64,
    },
}

/// Selects load buses for an event, either literally or by role.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BusSelector {
    Named(NamedSelector),
    List(Vec<BusId>),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedSelector {
    AllLoads,
    /// Dynamic load buses without an active SVC.
    Uncontrolled,
}

impl BusSelector {
    pub fn resolve(&self, load_ids: &[BusId], controlled: &[BusId]) -> Vec<BusId> {
        match self {
            BusSelector::List(ids) => ids.clone(),
            BusSelector::Named(NamedSelector::AllLoads) => load_ids.to_vec(),
            BusSelector::Named(NamedSelector::Uncontrolled) => load_ids
                .iter()
                .filter(|id| !controlled.contains(id))
                .copied()
                .collect(),
        }
    }
}
