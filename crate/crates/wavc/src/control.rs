//! Reference-steering voltage controller: trigger gates, assembly of the
//! affine deviation model from partitioned sensitivities, the boxed
//! infinity-norm solve, and reference dispatch.
//!
//! The decision variable is the total reference deviation from the
//! pre-disturbance baseline. The unknown disturbance terms are folded
//! into measured offsets: with `M = svq_uc svq_cc^-1` and `G = svq_cc^-1`,
//!
//! ```text
//! predicted dV_u(x) = M x + dist,   dist = dV_u_meas - M dV_c_applied
//! predicted dQ_c(x) = G x + q0,     q0   = dQ_c_meas - G dV_c_applied
//! ```
//!
//! so every coefficient is identified from PMU-visible quantities plus
//! the compensators' own output telemetry.

use crate::estim::PartitionedS;
use crate::lp::{solve_linf, LinfProblem, LinfSolution, LpStatus, RangeConstraint};
use crate::net::BusId;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("controlled-bus coupling block is singular; tick skipped")]
    SingularCoupling,
    #[error("optimisation infeasible (separating constraint {0}); tick skipped")]
    Infeasible(usize),
    #[error("lp: {0}")]
    Lp(#[from] crate::lp::LpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    /// No reference updates; compensators hold their baseline setpoints.
    #[default]
    None,
    /// Sensitivities identified from the ambient measurement window.
    ModelFree,
    /// Analytic sensitivities at the current grid's operating point.
    ModelBased,
    /// Analytic sensitivities frozen from before a topology change.
    ModelBasedStale,
}

/// Controller section of a scenario file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerSettings {
    #[serde(default)]
    pub mode: ControllerMode,
    /// Delay after the disturbance before the first action.
    #[serde(default = "default_d1")]
    pub d1_s: f64,
    /// Minimum interval between actions.
    #[serde(default = "default_d2")]
    pub d2_s: f64,
    /// Deviation magnitude that arms the controller.
    #[serde(default = "default_threshold")]
    pub threshold_pu: f64,
    /// Reference voltage band for every controlled bus.
    #[serde(default = "default_vc_bounds")]
    pub vc_bounds: (f64, f64),
    /// Compensator injection capability; derived from the device limits
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qc_bounds: Option<Vec<(f64, f64)>>,
    /// Steady-state window for the performance index.
    #[serde(default = "default_ss_window")]
    pub ss_window_s: f64,
    /// Buses participating in the control; every SVC bus when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controlled_buses: Option<Vec<BusId>>,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        ControllerSettings {
            mode: ControllerMode::None,
            d1_s: default_d1(),
            d2_s: default_d2(),
            threshold_pu: default_threshold(),
            vc_bounds: default_vc_bounds(),
            qc_bounds: None,
            ss_window_s: default_ss_window(),
            controlled_buses: None,
        }
    }
}

fn default_d1() -> f64 {
    30.0
}
fn default_d2() -> f64 {
    0.2
}
fn default_threshold() -> f64 {
    0.005
}
fn default_vc_bounds() -> (f64, f64) {
    (0.90, 1.10)
}
fn default_ss_window() -> f64 {
    20.0
}

/// Resolved runtime configuration, one entry per controlled bus.
#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub d1: f64,
    pub d2: f64,
    pub threshold: f64,
    pub v_bounds: Vec<(f64, f64)>,
    /// Injection capability of each compensator.
    pub q_inj_bounds: Vec<(f64, f64)>,
}

/// Per-run controller memory. The uncontrolled references are the
/// pre-disturbance steady state and stay fixed for the run.
#[derive(Debug, Clone)]
pub struct ControlState {
    pub v_ref_u: DVector<f64>,
    /// Baseline measured magnitudes at the controlled buses.
    pub v_c0: DVector<f64>,
    pub v_ref_c0: DVector<f64>,
    pub v_ref_c: DVector<f64>,
    pub q_svc0: DVector<f64>,
    pub last_action_t: Option<f64>,
    pub disturbance_t: Option<f64>,
}

/// What the controller reads each tick.
#[derive(Debug, Clone)]
pub struct Measurements {
    pub t: f64,
    /// Measured magnitudes at the observed uncontrolled buses.
    pub v_u: DVector<f64>,
    /// Measured magnitudes at the controlled buses.
    pub v_c: DVector<f64>,
    /// Compensator injection telemetry at the controlled buses.
    pub q_svc: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ControlAction {
    pub t: f64,
    /// Reference increments to apply now, per controlled bus.
    pub delta_vref: DVector<f64>,
    pub predicted_objective: f64,
}

/// All trigger gates: post-disturbance delay, inter-action spacing, and
/// the deviation threshold.
pub fn should_act(t: f64, max_abs_dv_u: f64, state: &ControlState, config: &ControllerConfig) -> bool {
    let Some(t_d) = state.disturbance_t else {
        return false;
    };
    if t < t_d + config.d1 {
        return false;
    }
    if let Some(last) = state.last_action_t {
        if t < last + config.d2 {
            return false;
        }
    }
    max_abs_dv_u >= config.threshold
}

/// Builds the epigraph problem for one tick. `dv_u_meas` and `dv_c_meas`
/// are measured deviations from the pre-disturbance steady state;
/// `dq_c_meas` is the network-frame reactive deviation at the controlled
/// buses (minus the injection change). Identifying the disturbance terms
/// from the measured snapshot keeps every quantity consistent with the
/// instantaneous network algebra, with no wind-up while commanded
/// references are still being realised.
pub fn assemble_problem(
    blocks: &PartitionedS,
    dv_u_meas: &DVector<f64>,
    dv_c_meas: &DVector<f64>,
    dq_c_meas: &DVector<f64>,
    state: &ControlState,
    config: &ControllerConfig,
) -> Result<LinfProblem, ControlError> {
    let n_c = blocks.controlled.len();
    let lu = blocks.svq_cc.clone().lu();
    let g = lu.try_inverse().ok_or(ControlError::SingularCoupling)?;
    let mc = &blocks.svq_uc * &g;

    let dist = dv_u_meas - &mc * dv_c_meas;
    let q0 = dq_c_meas - &g * dv_c_meas;

    let x_lo = DVector::from_fn(n_c, |k, _| config.v_bounds[k].0 - state.v_ref_c0[k]);
    let x_hi = DVector::from_fn(n_c, |k, _| config.v_bounds[k].1 - state.v_ref_c0[k]);

    // Injection capability translated to the network frame: the delivered
    // reactive deviation dQ_c = -(dQ_inj), bounded by the device range.
    let lo = DVector::from_fn(n_c, |k, _| {
        state.q_svc0[k] - config.q_inj_bounds[k].1 - q0[k]
    });
    let hi = DVector::from_fn(n_c, |k, _| {
        state.q_svc0[k] - config.q_inj_bounds[k].0 - q0[k]
    });

    Ok(LinfProblem {
        a: mc,
        b: dist,
        x_lo,
        x_hi,
        range: Some(RangeConstraint { g, lo, hi }),
    })
}

/// One controller instance per run.
#[derive(Debug, Clone)]
pub struct Controller {
    pub blocks: PartitionedS,
    pub config: ControllerConfig,
    pub state: ControlState,
    /// Ticks skipped with a diagnostic instead of aborting the run.
    pub skipped: Vec<(f64, String)>,
    pub actions: Vec<ControlAction>,
}

impl Controller {
    pub fn new(blocks: PartitionedS, config: ControllerConfig, state: ControlState) -> Self {
        Controller {
            blocks,
            config,
            state,
            skipped: Vec::new(),
            actions: Vec::new(),
        }
    }

    /// Evaluates one tick; emits the reference increments when every gate
    /// passes and the solve succeeds. Assembly or solve trouble is logged
    /// and the tick skipped.
    pub fn tick(&mut self, meas: &Measurements) -> Option<ControlAction> {
        let dv_u = &meas.v_u - &self.state.v_ref_u;
        // A fully controlled grid has no deviation gate; timing gates
        // still apply.
        let max_dev = if dv_u.is_empty() {
            f64::INFINITY
        } else {
            dv_u.amax()
        };
        if !should_act(meas.t, max_dev, &self.state, &self.config) {
            return None;
        }
        let dv_c_meas = &meas.v_c - &self.state.v_c0;
        // Network-frame reactive deviation from injection telemetry.
        let dq_c_meas = -(&meas.q_svc - &self.state.q_svc0);

        let n_u = self.blocks.uncontrolled.len();
        let solution: LinfSolution = if n_u == 0 {
            // Fully controlled grid: nothing to minimise, restore baselines.
            LinfSolution {
                x: DVector::zeros(self.blocks.controlled.len()),
                objective: 0.0,
                status: LpStatus::Optimal,
                active_set: vec![],
            }
        } else {
            let problem = match assemble_problem(
                &self.blocks,
                &dv_u,
                &dv_c_meas,
                &dq_c_meas,
                &self.state,
                &self.config,
            ) {
                Ok(p) => p,
                Err(e) => {
                    self.skipped.push((meas.t, e.to_string()));
                    return None;
                }
            };
            match solve_linf(&problem) {
                Ok(sol) => match sol.status {
                    LpStatus::Optimal => sol,
                    LpStatus::Infeasible { separating } => {
                        self.skipped
                            .push((meas.t, ControlError::Infeasible(separating).to_string()));
                        return None;
                    }
                },
                Err(e) => {
                    self.skipped.push((meas.t, e.to_string()));
                    return None;
                }
            }
        };

        let target = &self.state.v_ref_c0 + &solution.x;
        let delta = &target - &self.state.v_ref_c;
        self.state.v_ref_c = target;
        self.state.last_action_t = Some(meas.t);
        let action = ControlAction {
            t: meas.t,
            delta_vref: delta,
            predicted_objective: solution.objective,
        };
        self.actions.push(action.clone());
        Some(action)
    }
}

/// RMS of the steady-state voltage deviations at the uncontrolled buses:
/// per-bus mean over the final `ss_window_s` seconds against the fixed
/// references.
pub fn performance_index(
    v_u_trajectory: &DMatrix<f64>,
    v_ref_u: &DVector<f64>,
    ss_window_s: f64,
    sample_rate: f64,
) -> f64 {
    let n_u = v_ref_u.len();
    if n_u == 0 {
        return 0.0;
    }
    let n = v_u_trajectory.nrows();
    let take = ((ss_window_s * sample_rate).round() as usize).clamp(1, n);
    let start = n - take;
    let mut sum_sq = 0.0;
    for k in 0..n_u {
        let mut mean = 0.0;
        for i in start..n {
            mean += v_u_trajectory[(i, k)];
        }
        mean /= take as f64;
        let d = mean - v_ref_u[k];
        sum_sq += d * d;
    }
    (sum_sq / n_u as f64).sqrt()
}
