//! Experiment orchestration: case/scenario ingestion, the closed-loop
//! simulate -> estimate -> control -> score pipeline, PMU placement
//! ranking, and report/trajectory artifact emission.
//!
//! Pairing discipline: for one experiment seed, every controller mode
//! replays identical process and measurement noise streams, so score
//! differences isolate the controller.

mod csvio;
mod report;

pub use csvio::{parse_trajectory, read_trajectory, trajectory_to_csv, write_trajectory};
pub use report::{CellReport, EstimationReport, RunReport, SCHEMA_VERSION};

use crate::control::{
    performance_index, ControlState, Controller, ControllerConfig, ControllerMode,
    ControllerSettings, Measurements,
};
use crate::estim::{
    estimate_sensitivities, partition, EstimError, EstimationOptions, PartitionedS,
    SensitivityEstimate,
};
use crate::lp::LpError;
use crate::net::{
    branch_apparent_flows, effective_load_jacobian, solve_power_flow, BusId, GridCase, NetError,
    Network, SolveOptions, SvcDispatch,
};
use crate::sim::{
    sample_pmu, MeasurementSigma, NoiseKind, PmuWindow, Scenario, SimError, Simulator, SystemState,
};
use nalgebra::{DMatrix, DVector};
use rand_chacha::{rand_core::SeedableRng, ChaCha12Rng};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Estim(#[from] EstimError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(String),
    #[error("experiment: {0}")]
    Experiment(String),
    #[error("post-step power flow diverged; try a smaller step fraction")]
    RankStepDiverged(#[source] NetError),
    #[error("unknown bus {0}; valid ids: {1}")]
    UnknownPlotBus(BusId, String),
}

/// Experiment description: one case, one scenario, a mode x seed grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub case_file: PathBuf,
    pub scenario_file: PathBuf,
    pub modes: Vec<ControllerMode>,
    pub seeds: Vec<u64>,
    /// Output directory for the report and trajectories.
    pub outputs: PathBuf,
}

impl ExperimentSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut spec: ExperimentSpec = serde_json::from_str(&text)?;
        if spec.modes.is_empty() || spec.seeds.is_empty() {
            return Err(HarnessError::Experiment(
                "need at least one mode and one seed".into(),
            ));
        }
        // Relative paths resolve against the spec file's directory.
        if let Some(dir) = path.as_ref().parent() {
            for p in [
                &mut spec.case_file,
                &mut spec.scenario_file,
                &mut spec.outputs,
            ] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(spec)
    }
}

/// Process-noise stream for the disturbance phase, distinct from the
/// ambient estimation stream so the phases pair independently.
fn disturbance_rng(seed: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(3);
    rng
}

/// Per-sample measurement stream for the control phase.
fn control_meas_rng(seed: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(4);
    rng
}

/// Everything the disturbance phase needs about one grid configuration.
pub struct Prepared {
    /// Grid with pre-events applied, enabled SVCs set.
    pub sim: Simulator,
    pub baseline: SystemState,
    /// Buses whose SVCs participate in the control.
    pub controlled: Vec<BusId>,
    pub uncontrolled: Vec<BusId>,
    /// Baseline steady-state magnitudes at every load bus.
    pub v_ref_all: DVector<f64>,
    pub settings: ControllerSettings,
}

pub fn prepare(case: &GridCase, scenario: &Scenario) -> Result<Prepared, HarnessError> {
    let mut current = case.clone();
    // Pre-events change the grid before everything else (topology study).
    for kind in &scenario.pre_events {
        match kind {
            crate::sim::EventKind::LineTrip { from, to } => current.trip_branch(*from, *to)?,
            crate::sim::EventKind::LoadStep {
                buses,
                dp_frac,
                dq_frac,
            } => {
                let all_loads: Vec<BusId> = current
                    .buses
                    .iter()
                    .filter(|b| b.load.is_some())
                    .map(|b| b.id)
                    .collect();
                let svc_buses: Vec<BusId> = current.svcs.iter().map(|s| s.bus).collect();
                let targets = buses.resolve(&all_loads, &svc_buses);
                current.apply_load_step(&targets, *dp_frac, *dq_frac);
            }
            crate::sim::EventKind::SetVref { .. } => {
                return Err(HarnessError::Experiment(
                    "set_vref is not a valid pre-event".into(),
                ))
            }
        }
    }

    let settings = scenario.controller.clone().unwrap_or_default();
    let case_svcs: Vec<BusId> = current.svcs.iter().map(|s| s.bus).collect();
    let controlled: Vec<BusId> = match &settings.controlled_buses {
        Some(set) => {
            for b in set {
                if !case_svcs.contains(b) {
                    return Err(HarnessError::Experiment(format!(
                        "controlled bus {b} has no svc in the case"
                    )));
                }
            }
            set.clone()
        }
        None => case_svcs,
    };

    let net = Network::new(current)?;
    let mut sim = Simulator::new(net)?;
    sim.set_enabled_svcs(&controlled);
    let baseline = sim.initial_state()?;
    let load_ids = sim.load_ids();
    let uncontrolled: Vec<BusId> = load_ids
        .iter()
        .filter(|id| !controlled.contains(id))
        .copied()
        .collect();
    let v_ref_all = baseline.v.clone();
    Ok(Prepared {
        sim,
        baseline,
        controlled,
        uncontrolled,
        v_ref_all,
        settings,
    })
}

/// Ambient window for estimation: no events, process noise only, then
/// measurement noise and the PMU-availability reduction. Returns both the
/// truth window and the measured (noisy, possibly reduced) one.
pub fn ambient_window(
    prep: &Prepared,
    scenario: &Scenario,
    seed: u64,
) -> Result<(PmuWindow, PmuWindow), HarnessError> {
    let mut sim = prep.sim.clone();
    // Secondary control is idle while the window is collected; the
    // compensators hold their parked operating point.
    sim.svc_hold = true;
    let ambient = Scenario {
        duration_s: scenario.estimation_window_s,
        events: vec![],
        pre_events: vec![],
        controller: None,
        ..scenario.clone()
    };
    let mut rng = crate::sim::process_rng(seed);
    let out = sim.run(&ambient, &prep.baseline, &mut rng)?;
    let truth = out.window;
    let noise = crate::sim::NoiseModel {
        kind: scenario.noise.kind,
        seed: scenario.noise.seed.wrapping_add(seed),
    };
    let mut measured = crate::sim::apply_measurement_noise(&truth, &noise);
    if let Some(avail) = &scenario.pmu_buses {
        measured = measured.select_buses(avail);
    }
    Ok((truth, measured))
}

fn resolve_config(prep: &Prepared, controlled: &[BusId]) -> ControllerConfig {
    let settings = &prep.settings;
    let case = &prep.sim.net.case;
    let q_inj_bounds: Vec<(f64, f64)> = match &settings.qc_bounds {
        Some(b) if b.len() == controlled.len() => b.clone(),
        _ => controlled
            .iter()
            .map(|bus| {
                let svc = case.svcs.iter().find(|s| s.bus == *bus).expect("svc");
                let lo = svc.q_injection(svc.alpha_min, 1.0);
                let hi = svc.q_injection(svc.alpha_max, 1.0);
                (lo.min(hi), lo.max(hi))
            })
            .collect(),
    };
    ControllerConfig {
        d1: settings.d1_s,
        d2: settings.d2_s,
        threshold: settings.threshold_pu,
        v_bounds: vec![settings.vc_bounds; controlled.len()],
        q_inj_bounds,
    }
}

/// Sensitivity blocks for one mode.
pub enum ModeBlocks {
    NoController,
    /// Controller participates with these blocks over the observed sets.
    Active(PartitionedS),
    /// Every controlled PMU is missing: run uncontrolled, note why.
    Disabled(String),
}

pub fn blocks_for_mode(
    mode: ControllerMode,
    prep: &Prepared,
    original_case: &GridCase,
    estimate: Option<&SensitivityEstimate>,
    scenario: &Scenario,
) -> Result<ModeBlocks, HarnessError> {
    match mode {
        ControllerMode::None => Ok(ModeBlocks::NoController),
        ControllerMode::ModelFree => {
            let est = estimate.ok_or_else(|| {
                HarnessError::Experiment("model-free mode requires an estimate".into())
            })?;
            // Estimation already ran on the available channels only, so the
            // observed sets are intersections with the estimated buses.
            let controlled: Vec<BusId> = prep
                .controlled
                .iter()
                .filter(|b| est.bus_ids.contains(b))
                .copied()
                .collect();
            if controlled.is_empty() {
                return Ok(ModeBlocks::Disabled(
                    "no controlled bus retains a PMU".into(),
                ));
            }
            let uncontrolled: Vec<BusId> = est
                .bus_ids
                .iter()
                .filter(|b| !controlled.contains(b))
                .copied()
                .collect();
            let parts = partition(&est.s_hat, &est.bus_ids, &controlled, &uncontrolled)?;
            Ok(ModeBlocks::Active(parts))
        }
        ControllerMode::ModelBased | ControllerMode::ModelBasedStale => {
            // Analytic sensitivities at the solved operating point of the
            // current grid (model_based) or of the grid before the
            // pre-events (model_based_stale).
            let (net, state): (Network, SystemState) = if mode == ControllerMode::ModelBased {
                (prep.sim.net.clone(), prep.baseline.clone())
            } else {
                let net = Network::new(original_case.clone())?;
                let mut sim = Simulator::new(net.clone())?;
                sim.set_enabled_svcs(&prep.controlled);
                let st = sim.initial_state()?;
                (net, st)
            };
            let sim_for_profile = Simulator::new(net.clone())?;
            let (theta_full, v_full) = sim_for_profile.full_profile(&state);
            let j = effective_load_jacobian(&net, &theta_full, &v_full)?.assemble();
            let index = &net.index;
            let m = index.n_loads();
            let mut a_scaled = j.clone();
            let mut t_theta = DVector::zeros(m);
            let mut t_v = DVector::zeros(m);
            for (k, &pos) in index.load_pos.iter().enumerate() {
                let load = net.case.buses[pos].load.as_ref().expect("load");
                t_theta[k] = load.tau_theta;
                t_v[k] = load.tau_v;
                for c in 0..2 * m {
                    a_scaled[(k, c)] /= load.tau_theta;
                    a_scaled[(m + k, c)] /= load.tau_v;
                }
            }
            let (_, s_true) =
                crate::estim::extract_sensitivities(&a_scaled, &t_theta, &t_v, &index.load_ids())?;
            // The model-based controller reads the same PMUs as everyone.
            let available: Vec<BusId> = scenario
                .pmu_buses
                .clone()
                .unwrap_or_else(|| index.load_ids());
            let controlled: Vec<BusId> = prep
                .controlled
                .iter()
                .filter(|b| available.contains(b))
                .copied()
                .collect();
            if controlled.is_empty() {
                return Ok(ModeBlocks::Disabled(
                    "no controlled bus retains a PMU".into(),
                ));
            }
            let load_ids = index.load_ids();
            let uncontrolled: Vec<BusId> = available
                .iter()
                .filter(|b| load_ids.contains(b) && !controlled.contains(b))
                .copied()
                .collect();
            let parts = partition(&s_true, &load_ids, &controlled, &uncontrolled)?;
            Ok(ModeBlocks::Active(parts))
        }
    }
}

/// Output of one closed-loop disturbance run.
pub struct ClosedLoopRun {
    pub window: PmuWindow,
    pub lambda: f64,
    pub action_count: usize,
    pub skipped_ticks: usize,
    pub max_solve_seconds: f64,
    /// Reference increments emitted over the run, for diagnostics.
    pub actions: Vec<crate::control::ControlAction>,
}

/// Integrates the disturbance scenario with the controller in the loop.
pub fn run_closed_loop(
    prep: &Prepared,
    scenario: &Scenario,
    blocks: ModeBlocks,
    seed: u64,
    truth_ambient: Option<&PmuWindow>,
) -> Result<ClosedLoopRun, HarnessError> {
    let mut sim = prep.sim.clone();
    let m = sim.n_loads();
    let load_ids = sim.load_ids();
    let dt = scenario.dt_s;
    let rate = scenario.sample_rate_hz;
    let substeps = (1.0 / (rate * dt)).round() as usize;
    if substeps == 0 || ((substeps as f64) * rate * dt - 1.0).abs() > 1e-9 {
        return Err(HarnessError::Experiment(format!(
            "dt {dt} does not divide the sample interval 1/{rate}"
        )));
    }
    let n_samples = (scenario.duration_s * rate).round() as usize;

    // Measurement noise per channel: window-relative for the low model.
    let sigma_all = match (scenario.noise.kind, truth_ambient) {
        (NoiseKind::Low, Some(win)) => MeasurementSigma::for_window(win, NoiseKind::Low),
        (NoiseKind::Low, None) => {
            return Err(HarnessError::Experiment(
                "low measurement noise needs an ambient window to calibrate against".into(),
            ))
        }
        (kind, _) => MeasurementSigma {
            theta: DVector::from_element(m, if kind == NoiseKind::High { 1e-4 } else { 0.0 }),
            v: DVector::from_element(m, if kind == NoiseKind::High { 1e-4 } else { 0.0 }),
        },
    };

    let mut controller = match blocks {
        ModeBlocks::NoController | ModeBlocks::Disabled(_) => None,
        ModeBlocks::Active(parts) => {
            let config = resolve_config(prep, &parts.controlled);
            // Baseline references over the observed sets.
            let vref_u = DVector::from_fn(parts.uncontrolled.len(), |i, _| {
                let k = load_ids
                    .iter()
                    .position(|b| *b == parts.uncontrolled[i])
                    .unwrap();
                prep.v_ref_all[k]
            });
            let svc_idx: Vec<usize> = parts
                .controlled
                .iter()
                .map(|b| sim.net.case.svcs.iter().position(|s| s.bus == *b).unwrap())
                .collect();
            let vref_c0 = DVector::from_fn(parts.controlled.len(), |i, _| {
                prep.baseline.svc_vref[svc_idx[i]]
            });
            let c_cols: Vec<usize> = parts
                .controlled
                .iter()
                .map(|b| load_ids.iter().position(|x| x == b).unwrap())
                .collect();
            let v_c0 = DVector::from_fn(parts.controlled.len(), |i, _| {
                prep.v_ref_all[c_cols[i]]
            });
            let q0_all = sim.svc_injections(&prep.baseline);
            let q_svc0 = DVector::from_fn(parts.controlled.len(), |i, _| q0_all[svc_idx[i]]);
            let state = ControlState {
                v_ref_u: vref_u,
                v_c0,
                v_ref_c0: vref_c0.clone(),
                v_ref_c: vref_c0,
                q_svc0,
                last_action_t: None,
                disturbance_t: scenario.disturbance_time(),
            };
            Some((Controller::new(parts, config, state), svc_idx))
        }
    };

    // Column indices of the observed buses in load order.
    let obs_u_cols: Vec<usize> = controller
        .as_ref()
        .map(|(c, _)| {
            c.blocks
                .uncontrolled
                .iter()
                .map(|b| load_ids.iter().position(|x| x == b).unwrap())
                .collect()
        })
        .unwrap_or_default();
    let obs_c_cols: Vec<usize> = controller
        .as_ref()
        .map(|(c, _)| {
            c.blocks
                .controlled
                .iter()
                .map(|b| load_ids.iter().position(|x| x == b).unwrap())
                .collect()
        })
        .unwrap_or_default();

    let mut events: Vec<(f64, crate::sim::EventKind)> = scenario
        .events
        .iter()
        .map(|e| (e.at_s, e.kind.clone()))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut next_event = 0usize;

    let mut window = PmuWindow {
        sample_rate: rate,
        t0: prep.baseline.t,
        bus_ids: load_ids.clone(),
        theta: DMatrix::zeros(n_samples, m),
        v: DMatrix::zeros(n_samples, m),
        p: Some(DMatrix::zeros(n_samples, m)),
        q: Some(DMatrix::zeros(n_samples, m)),
    };

    let mut state = prep.baseline.clone();
    let mut process = disturbance_rng(seed);
    let mut meas_rng = control_meas_rng(scenario.noise.seed.wrapping_add(seed));
    let mut max_solve = 0.0f64;

    for row in 0..n_samples {
        let mut p_acc = DVector::zeros(m);
        let mut q_acc = DVector::zeros(m);
        for _ in 0..substeps {
            while next_event < events.len() && state.t >= events[next_event].0 - 1e-12 {
                let kind = events[next_event].1.clone();
                sim.apply_event(&kind, &mut state)?;
                next_event += 1;
            }
            let (next, p_drive, q_drive) = sim.step(&state, dt, &mut process)?;
            p_acc += p_drive;
            q_acc += q_drive;
            state = next;
        }
        for k in 0..m {
            window.theta[(row, k)] = state.theta[k];
            window.v[(row, k)] = state.v[k];
            window.p.as_mut().unwrap()[(row, k)] = p_acc[k] / substeps as f64;
            window.q.as_mut().unwrap()[(row, k)] = q_acc[k] / substeps as f64;
        }

        if let Some((controller, svc_idx)) = &mut controller {
            // Measured magnitudes at the observed buses plus compensator
            // telemetry; one joint noisy sample keeps the streams paired.
            let n_obs = obs_u_cols.len() + obs_c_cols.len();
            let truth = DVector::from_fn(n_obs, |i, _| {
                if i < obs_u_cols.len() {
                    state.v[obs_u_cols[i]]
                } else {
                    state.v[obs_c_cols[i - obs_u_cols.len()]]
                }
            });
            let sigma = MeasurementSigma {
                theta: DVector::zeros(n_obs),
                v: DVector::from_fn(n_obs, |i, _| {
                    if i < obs_u_cols.len() {
                        sigma_all.v[obs_u_cols[i]]
                    } else {
                        sigma_all.v[obs_c_cols[i - obs_u_cols.len()]]
                    }
                }),
            };
            let (_, v_meas) = sample_pmu(&DVector::zeros(n_obs), &truth, &sigma, &mut meas_rng);
            let v_u = DVector::from_fn(obs_u_cols.len(), |i, _| v_meas[i]);
            let v_c =
                DVector::from_fn(obs_c_cols.len(), |i, _| v_meas[obs_u_cols.len() + i]);
            let q_all = sim.svc_injections(&state);
            let q_svc = DVector::from_fn(svc_idx.len(), |i, _| q_all[svc_idx[i]]);
            let solve_start = Instant::now();
            let action = controller.tick(&Measurements {
                t: state.t,
                v_u,
                v_c,
                q_svc,
            });
            if let Some(action) = action {
                max_solve = max_solve.max(solve_start.elapsed().as_secs_f64());
                for (i, &s) in svc_idx.iter().enumerate() {
                    state.svc_vref[s] += action.delta_vref[i];
                }
            }
        }
    }

    // Score over the full physical uncontrolled set, truth trajectory.
    let u_cols: Vec<usize> = load_ids
        .iter()
        .enumerate()
        .filter(|(_, id)| prep.uncontrolled.contains(id))
        .map(|(i, _)| i)
        .collect();
    let v_u = window.v.select_columns(&u_cols);
    let refs = DVector::from_fn(u_cols.len(), |i, _| prep.v_ref_all[u_cols[i]]);
    let lambda = performance_index(&v_u, &refs, prep.settings.ss_window_s, rate);

    let (action_count, skipped, actions) = controller
        .as_ref()
        .map(|(c, _)| (c.actions.len(), c.skipped.len(), c.actions.clone()))
        .unwrap_or((0, 0, Vec::new()));
    Ok(ClosedLoopRun {
        window,
        lambda,
        action_count,
        skipped_ticks: skipped,
        max_solve_seconds: max_solve,
        actions,
    })
}

/// Runs the full mode x seed grid and writes trajectories plus the report.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunReport, HarnessError> {
    let case = GridCase::load(&spec.case_file)?;
    let scenario = Scenario::load(&spec.scenario_file)
        .map_err(|e| HarnessError::Experiment(format!("scenario: {e}")))?;
    std::fs::create_dir_all(&spec.outputs)?;

    let original_case = case.clone();
    let mut report = RunReport::new(spec, &scenario);

    for &seed in &spec.seeds {
        let prep = prepare(&case, &scenario)?;
        // One ambient window per seed feeds every estimating mode and the
        // low-noise calibration.
        let needs_ambient = spec.modes.iter().any(|m| *m != ControllerMode::None)
            || scenario.noise.kind == NoiseKind::Low;
        let mut truth_ambient = None;
        let mut estimate = None;
        let mut est_report = None;
        if needs_ambient {
            let est_start = Instant::now();
            let (truth, measured) = ambient_window(&prep, &scenario, seed)?;
            if spec.modes.contains(&ControllerMode::ModelFree) {
                let opts = EstimationOptions {
                    regression_samples: scenario
                        .regression_window_s
                        .map(|w| (w * scenario.sample_rate_hz).round() as usize),
                };
                match estimate_sensitivities(&measured, &opts) {
                    Ok(est) => {
                        est_report = Some(report::estimation_summary(
                            &est,
                            &prep.sim,
                            est_start.elapsed().as_secs_f64(),
                        ));
                        estimate = Some(est);
                    }
                    Err(e) => {
                        // Every model-free cell for this seed fails; the
                        // rest of the experiment continues.
                        for &mode in &spec.modes {
                            if mode == ControllerMode::ModelFree {
                                report.push_failed(mode, seed, e.to_string());
                            }
                        }
                    }
                }
            }
            truth_ambient = Some(truth);
        }

        for &mode in &spec.modes {
            if mode == ControllerMode::ModelFree && estimate.is_none() {
                continue; // already recorded as failed
            }
            let blocks =
                match blocks_for_mode(mode, &prep, &original_case, estimate.as_ref(), &scenario) {
                    Ok(b) => b,
                    Err(e) => {
                        report.push_failed(mode, seed, e.to_string());
                        continue;
                    }
                };
            let disabled_note = match &blocks {
                ModeBlocks::Disabled(why) => Some(why.clone()),
                _ => None,
            };
            match run_closed_loop(&prep, &scenario, blocks, seed, truth_ambient.as_ref()) {
                Ok(run) => {
                    let file = format!("trajectory_{}_{}.csv", report::mode_slug(mode), seed);
                    write_trajectory(spec.outputs.join(&file), &run.window)?;
                    report.push_cell(CellReport {
                        mode,
                        seed,
                        lambda: run.lambda,
                        action_count: run.action_count,
                        skipped_ticks: run.skipped_ticks,
                        controller_disabled: disabled_note,
                        estimation: if mode == ControllerMode::ModelFree {
                            est_report.clone()
                        } else {
                            None
                        },
                        max_solve_seconds: run.max_solve_seconds,
                        trajectory_file: file,
                        error: None,
                    });
                }
                Err(e) => report.push_failed(mode, seed, e.to_string()),
            }
        }
    }

    report.validate()?;
    let report_path = spec.outputs.join("report.json");
    std::fs::write(&report_path, report.to_json()?)?;
    Ok(report)
}

/// Ranks dynamic load buses by the apparent-power rise on their incident
/// branches under a uniform active-power step, the placement indicator
/// for PMU budgeting. Descending score, ties broken by ascending bus id.
pub fn rank_pmu_locations(
    case: &GridCase,
    load_step_fraction: f64,
) -> Result<Vec<(BusId, f64)>, HarnessError> {
    let net = Network::new(case.clone())?;
    let base = solve_power_flow(&net, &SolveOptions::from_case(&net, SvcDispatch::Off))?;
    let base_flows = branch_apparent_flows(&net, &base.theta, &base.v);

    let mut stepped_case = case.clone();
    let load_ids: Vec<BusId> = stepped_case
        .buses
        .iter()
        .filter(|b| b.load.is_some())
        .map(|b| b.id)
        .collect();
    let total_dp: f64 = stepped_case
        .buses
        .iter()
        .filter_map(|b| b.load.as_ref())
        .map(|l| l.ps * load_step_fraction)
        .sum();
    stepped_case.apply_load_step(&load_ids, load_step_fraction, 0.0);
    let net2 = Network::new(stepped_case)?;
    let stepped = solve_power_flow(&net2, &SolveOptions::from_case(&net2, SvcDispatch::Off))
        .map_err(HarnessError::RankStepDiverged)?;
    let stepped_flows = branch_apparent_flows(&net2, &stepped.theta, &stepped.v);

    let denom = if total_dp.abs() > 0.0 { total_dp } else { 1.0 };
    let mut bus_score: Vec<(BusId, f64)> = load_ids.iter().map(|&b| (b, 0.0)).collect();
    for ((bi, s0), (_, s1)) in base_flows.iter().zip(&stepped_flows) {
        let branch = &case.branches[*bi];
        let score = (s1 - s0).abs() / denom;
        for (bus, best) in &mut bus_score {
            if branch.from == *bus || branch.to == *bus {
                *best = best.max(score);
            }
        }
    }
    bus_score.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0 .0.cmp(&b.0 .0)));
    Ok(bus_score)
}

/// Aligned per-mode voltage columns for one bus, for external plotting.
/// Values pass through the shortest round-trip formatting, so they match
/// the trajectory files exactly.
pub fn emit_plot_data(
    report: &RunReport,
    outputs: &Path,
    bus: BusId,
    seed: u64,
) -> Result<String, HarnessError> {
    let cells: Vec<&CellReport> = report
        .cells
        .iter()
        .filter(|c| c.seed == seed && c.error.is_none())
        .collect();
    if cells.is_empty() {
        return Err(HarnessError::Experiment(format!(
            "no successful cells for seed {seed}"
        )));
    }
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    let mut times: Option<Vec<f64>> = None;
    for cell in &cells {
        let window = read_trajectory(outputs.join(&cell.trajectory_file))?;
        let Some(col) = window.bus_ids.iter().position(|b| *b == bus) else {
            let valid = window
                .bus_ids
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(", ");
            return Err(HarnessError::UnknownPlotBus(bus, valid));
        };
        let n = window.n_samples();
        if times.is_none() {
            let dt = window.dt();
            times = Some((0..n).map(|i| window.t0 + (i + 1) as f64 * dt).collect());
        }
        let vals: Vec<f64> = (0..n).map(|i| window.v[(i, col)]).collect();
        columns.push((format!("v_{}", report::mode_slug(cell.mode)), vals));
    }
    let times = times.unwrap();
    let mut out = String::from("t");
    for (name, _) in &columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, t) in times.iter().enumerate() {
        use std::fmt::Write as _;
        let _ = write!(out, "{t}");
        for (_, vals) in &columns {
            let _ = write!(out, ",{}", vals[i]);
        }
        out.push('\n');
    }
    Ok(out)
}
