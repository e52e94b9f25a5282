//! Euler-Maruyama integration of the stochastic load and SVC dynamics,
//! with quasi-steady network coupling: static junction buses rebalance
//! algebraically inside every substep, so the load-bus process is exactly
//! the linear diffusion implied by the effective load Jacobian.
//!
//! Measurement convention: the recorded `p`/`q` channels are the powers
//! the recovery dynamics actually integrated over each reporting
//! interval, i.e. the interval-averaged load-side absorption including
//! SVC injection and the stochastic demand fluctuation. The angle and
//! magnitude channels are instantaneous truth; measurement noise is a
//! separate post-processing step ([`apply_measurement_noise`]).

mod scenario;

pub use scenario::{BusSelector, EventKind, Scenario, ScenarioEvent};

use crate::net::{
    injection_jacobian, power_injections, solve_power_flow, BusId, NetError, Network,
    PowerFlowSolution, SolveOptions, SvcDispatch,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha12Rng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("integration diverged at bus {bus} (t = {t:.4} s)")]
    IntegrationDiverged { bus: BusId, t: f64 },
    #[error("static subnetwork failed to rebalance at t = {t:.4} s")]
    StaticRebalance { t: f64 },
    #[error("scenario: {0}")]
    Scenario(String),
}

/// Dynamic state of a run. Load-bus vectors follow the measurement
/// ordering (`CaseIndex::load_ids`); SVC vectors follow case SVC order.
/// The static-bus entries are the algebraic solution carried along as a
/// warm start, not independent state.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub t: f64,
    pub theta: DVector<f64>,
    pub v: DVector<f64>,
    pub svc_vm: DVector<f64>,
    pub svc_alpha: DVector<f64>,
    pub svc_vref: DVector<f64>,
    pub static_theta: DVector<f64>,
    pub static_v: DVector<f64>,
}

/// Measurement noise model for PMU channels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct NoiseModel {
    #[serde(default)]
    pub kind: NoiseKind,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    None,
    /// Gaussian, std = 10% of the per-channel peak-to-peak excursion over
    /// the window.
    Low,
    /// Gaussian, fixed std 1e-4 on angle and magnitude channels.
    High,
}

/// Time-aligned measurement window at the dynamic load buses. Row i holds
/// the sample at `t0 + (i + 1) / sample_rate`; the power channels hold the
/// average absorbed power over the interval ending at that instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PmuWindow {
    pub sample_rate: f64,
    pub t0: f64,
    pub bus_ids: Vec<BusId>,
    pub theta: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub p: Option<DMatrix<f64>>,
    pub q: Option<DMatrix<f64>>,
}

impl PmuWindow {
    pub fn n_samples(&self) -> usize {
        self.theta.nrows()
    }

    pub fn n_buses(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    /// Keeps only the listed buses (measurement reduction for missing
    /// PMUs), preserving window order.
    pub fn select_buses(&self, keep: &[BusId]) -> PmuWindow {
        let cols: Vec<usize> = self
            .bus_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| keep.contains(id))
            .map(|(i, _)| i)
            .collect();
        let pick = |m: &DMatrix<f64>| m.select_columns(&cols);
        PmuWindow {
            sample_rate: self.sample_rate,
            t0: self.t0,
            bus_ids: cols.iter().map(|&i| self.bus_ids[i]).collect(),
            theta: pick(&self.theta),
            v: pick(&self.v),
            p: self.p.as_ref().map(&pick),
            q: self.q.as_ref().map(&pick),
        }
    }

    /// Stacked state matrix `[theta; v]`, one column per sample.
    pub fn state_matrix(&self) -> DMatrix<f64> {
        let n = self.n_samples();
        let m = self.n_buses();
        let mut f = DMatrix::zeros(2 * m, n);
        for i in 0..n {
            for k in 0..m {
                f[(k, i)] = self.theta[(i, k)];
                f[(m + k, i)] = self.v[(i, k)];
            }
        }
        f
    }
}

/// Per-channel measurement noise levels derived from a window.
#[derive(Debug, Clone)]
pub struct MeasurementSigma {
    pub theta: DVector<f64>,
    pub v: DVector<f64>,
}

impl MeasurementSigma {
    pub fn for_window(window: &PmuWindow, kind: NoiseKind) -> MeasurementSigma {
        let m = window.n_buses();
        match kind {
            NoiseKind::None => MeasurementSigma {
                theta: DVector::zeros(m),
                v: DVector::zeros(m),
            },
            NoiseKind::High => MeasurementSigma {
                theta: DVector::from_element(m, 1e-4),
                v: DVector::from_element(m, 1e-4),
            },
            NoiseKind::Low => {
                let span = |col: nalgebra::DVectorView<f64>| {
                    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let min = col.iter().copied().fold(f64::INFINITY, f64::min);
                    max - min
                };
                MeasurementSigma {
                    theta: DVector::from_fn(m, |k, _| 0.1 * span(window.theta.column(k))),
                    v: DVector::from_fn(m, |k, _| 0.1 * span(window.v.column(k))),
                }
            }
        }
    }
}

/// Adds measurement noise to the angle and magnitude channels of a truth
/// window. Deterministic for a given model.
pub fn apply_measurement_noise(window: &PmuWindow, model: &NoiseModel) -> PmuWindow {
    if model.kind == NoiseKind::None {
        return window.clone();
    }
    let sigma = MeasurementSigma::for_window(window, model.kind);
    let mut rng = measurement_rng(model.seed);
    let mut out = window.clone();
    for i in 0..out.n_samples() {
        for k in 0..out.n_buses() {
            let e_t: f64 = rng.sample(StandardNormal);
            let e_v: f64 = rng.sample(StandardNormal);
            out.theta[(i, k)] += sigma.theta[k] * e_t;
            out.v[(i, k)] += sigma.v[k] * e_v;
        }
    }
    out
}

/// One noisy measurement row from a truth state.
pub fn sample_pmu(
    truth_theta: &DVector<f64>,
    truth_v: &DVector<f64>,
    sigma: &MeasurementSigma,
    rng: &mut ChaCha12Rng,
) -> (DVector<f64>, DVector<f64>) {
    let m = truth_theta.len();
    let mut theta = truth_theta.clone();
    let mut v = truth_v.clone();
    for k in 0..m {
        let e_t: f64 = rng.sample(StandardNormal);
        let e_v: f64 = rng.sample(StandardNormal);
        theta[k] += sigma.theta[k] * e_t;
        v[k] += sigma.v[k] * e_v;
    }
    (theta, v)
}

/// Process-noise stream for a run.
pub fn process_rng(seed: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Measurement-noise stream, independent of the process stream.
pub fn measurement_rng(seed: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

/// Integrates one network: owns the case, its admittance matrix, and the
/// load/SVC bookkeeping. Runs are independent; clone the simulator for
/// parallel scenarios.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub net: Network,
    /// Load-bus positions into the full bus vector, measurement order.
    load_pos: Vec<usize>,
    static_pos: Vec<usize>,
    svc_pos_in_loads: Vec<usize>,
    /// Per-SVC enable flag; disabled SVCs inject nothing and hold state.
    svc_enabled: Vec<bool>,
    ps: DVector<f64>,
    qs: DVector<f64>,
    /// Noise coefficients `ps * sigma_p / tau_theta` etc.
    noise_p: DVector<f64>,
    noise_q: DVector<f64>,
    inv_tau_theta: DVector<f64>,
    inv_tau_v: DVector<f64>,
    static_tol: f64,
    /// Hold the regulator states (injection continues at the frozen
    /// angle); used while collecting ambient windows with the secondary
    /// control idle.
    pub svc_hold: bool,
}

impl Simulator {
    pub fn new(net: Network) -> Result<Self, SimError> {
        let index = &net.index;
        let load_pos = index.load_pos.clone();
        let static_pos = index.static_pos.clone();
        let m = load_pos.len();
        let mut ps = DVector::zeros(m);
        let mut qs = DVector::zeros(m);
        let mut inv_tau_theta = DVector::zeros(m);
        let mut inv_tau_v = DVector::zeros(m);
        let mut sigma_p = DVector::zeros(m);
        let mut sigma_q = DVector::zeros(m);
        for (k, &pos) in load_pos.iter().enumerate() {
            let load = net.case.buses[pos].load.as_ref().expect("load bus");
            ps[k] = load.ps;
            qs[k] = load.qs;
            inv_tau_theta[k] = 1.0 / load.tau_theta;
            inv_tau_v[k] = 1.0 / load.tau_v;
            sigma_p[k] = load.sigma_p;
            sigma_q[k] = load.sigma_q;
        }
        let noise_p = DVector::from_fn(m, |k, _| ps[k] * sigma_p[k] * inv_tau_theta[k]);
        let noise_q = DVector::from_fn(m, |k, _| qs[k] * sigma_q[k] * inv_tau_v[k]);
        let svc_pos_in_loads = net
            .case
            .svcs
            .iter()
            .map(|s| {
                load_pos
                    .iter()
                    .position(|&p| net.index.ids[p] == s.bus)
                    .expect("validated: svc on a load bus")
            })
            .collect();
        let svc_enabled = vec![true; net.case.svcs.len()];
        Ok(Simulator {
            net,
            load_pos,
            static_pos,
            svc_pos_in_loads,
            svc_enabled,
            ps,
            qs,
            noise_p,
            noise_q,
            inv_tau_theta,
            inv_tau_v,
            static_tol: 1e-10,
            svc_hold: false,
        })
    }

    pub fn n_loads(&self) -> usize {
        self.load_pos.len()
    }

    pub fn load_ids(&self) -> Vec<BusId> {
        self.net.index.load_ids()
    }

    /// Takes SVCs outside `enabled` out of service (no injection, frozen
    /// state).
    pub fn set_enabled_svcs(&mut self, enabled: &[BusId]) {
        for (s, svc) in self.net.case.svcs.iter().enumerate() {
            self.svc_enabled[s] = enabled.contains(&svc.bus);
        }
    }

    pub fn enabled_svc_buses(&self) -> Vec<BusId> {
        self.net
            .case
            .svcs
            .iter()
            .zip(&self.svc_enabled)
            .filter(|(_, &on)| on)
            .map(|(s, _)| s.bus)
            .collect()
    }

    /// Solves the steady state honouring enabled SVCs. When a reference is
    /// not set in the case, each enabled SVC is parked at its neutral
    /// (zero-injection) angle and the reference back-computed, so the
    /// solved point is an exact equilibrium of the full dynamics.
    pub fn solve_equilibrium(&self) -> Result<(PowerFlowSolution, DVector<f64>), SimError> {
        let case = &self.net.case;
        let n_svc = case.svcs.len();
        if n_svc == 0 {
            let sol = solve_power_flow(
                &self.net,
                &SolveOptions::from_case(&self.net, SvcDispatch::Off),
            )?;
            return Ok((sol, DVector::zeros(0)));
        }
        let all_enabled_have_refs = case
            .svcs
            .iter()
            .zip(&self.svc_enabled)
            .all(|(s, &on)| !on || s.vref0.is_some());
        if all_enabled_have_refs && self.svc_enabled.iter().any(|&on| on) {
            // Regulate enabled units against their references; park the
            // rest at neutral by giving them a reference consistent with
            // zero injection (they are excluded from dynamics anyway).
            let refs: Vec<f64> = case
                .svcs
                .iter()
                .zip(&self.svc_enabled)
                .map(|(s, &on)| {
                    if on {
                        s.vref0.unwrap()
                    } else {
                        // Placeholder; replaced after the solve.
                        f64::NAN
                    }
                })
                .collect();
            if self.svc_enabled.iter().all(|&on| on) {
                let sol = solve_power_flow(
                    &self.net,
                    &SolveOptions::from_case(&self.net, SvcDispatch::Regulated(refs.clone())),
                )?;
                let vref = DVector::from_vec(refs);
                return Ok((sol, vref));
            }
        }
        // Neutral parking path: every unit at its zero-injection angle.
        let alphas: Vec<f64> = case.svcs.iter().map(SvcParamsExt::park_angle).collect();
        let sol = solve_power_flow(
            &self.net,
            &SolveOptions::from_case(&self.net, SvcDispatch::FixedAlpha(alphas.clone())),
        )?;
        let mut vref = DVector::zeros(n_svc);
        for (s, svc) in case.svcs.iter().enumerate() {
            let vb = sol.v[self.net.index.pos[&svc.bus]];
            vref[s] = svc
                .vref0
                .unwrap_or(svc.k_m * vb + svc.k_d / svc.k * alphas[s]);
        }
        let mut sol = sol;
        sol.svc_alpha = alphas;
        Ok((sol, vref))
    }

    /// Equilibrium initial state for the current case.
    pub fn initial_state(&self) -> Result<SystemState, SimError> {
        let (sol, vref) = self.solve_equilibrium()?;
        Ok(self.state_from_solution(&sol, &vref))
    }

    pub fn state_from_solution(
        &self,
        sol: &PowerFlowSolution,
        vref: &DVector<f64>,
    ) -> SystemState {
        let m = self.load_pos.len();
        let theta = DVector::from_fn(m, |k, _| sol.theta[self.load_pos[k]]);
        let v = DVector::from_fn(m, |k, _| sol.v[self.load_pos[k]]);
        let s_cnt = self.static_pos.len();
        let static_theta = DVector::from_fn(s_cnt, |k, _| sol.theta[self.static_pos[k]]);
        let static_v = DVector::from_fn(s_cnt, |k, _| sol.v[self.static_pos[k]]);
        let n_svc = self.net.case.svcs.len();
        let svc_alpha = DVector::from_fn(n_svc, |s, _| {
            sol.svc_alpha
                .get(s)
                .copied()
                .unwrap_or_else(|| self.net.case.svcs[s].park_angle())
        });
        let svc_vm = DVector::from_fn(n_svc, |s, _| {
            let svc = &self.net.case.svcs[s];
            svc.k_m * sol.v[self.net.index.pos[&svc.bus]]
        });
        SystemState {
            t: 0.0,
            theta,
            v,
            svc_vm,
            svc_alpha,
            svc_vref: vref.clone(),
            static_theta,
            static_v,
        }
    }

    /// Full-length (all buses) voltage vectors for a state.
    pub fn full_profile(&self, state: &SystemState) -> (DVector<f64>, DVector<f64>) {
        let n = self.net.index.n_buses();
        let mut theta = DVector::zeros(n);
        let mut v = DVector::from_element(n, 1.0);
        for gen in &self.net.case.generators {
            let p = self.net.index.pos[&gen.bus];
            theta[p] = gen.theta;
            v[p] = gen.v;
        }
        for (k, &p) in self.load_pos.iter().enumerate() {
            theta[p] = state.theta[k];
            v[p] = state.v[k];
        }
        for (k, &p) in self.static_pos.iter().enumerate() {
            theta[p] = state.static_theta[k];
            v[p] = state.static_v[k];
        }
        (theta, v)
    }

    /// Rebalances the static junctions for the given full profile.
    fn solve_statics(
        &self,
        theta: &mut DVector<f64>,
        v: &mut DVector<f64>,
        t: f64,
    ) -> Result<(), SimError> {
        let statics = &self.static_pos;
        let s = statics.len();
        if s == 0 {
            return Ok(());
        }
        for attempt in 0..2 {
            if attempt == 1 {
                // Cold restart from a flat profile.
                for &p in statics {
                    theta[p] = 0.0;
                    v[p] = 1.0;
                }
            }
            let mut converged = false;
            for _ in 0..30 {
                let (p_inj, q_inj) = power_injections(theta, v, &self.net.ybus, statics);
                let mut res = DVector::zeros(2 * s);
                for i in 0..s {
                    res[i] = p_inj[i];
                    res[s + i] = q_inj[i];
                }
                if res.amax() < self.static_tol {
                    converged = true;
                    break;
                }
                let blocks = injection_jacobian(theta, v, &self.net.ybus, statics, statics);
                let jac = blocks.assemble();
                let Some(step) = jac.lu().solve(&res) else {
                    break;
                };
                if !step.iter().all(|x| x.is_finite()) {
                    break;
                }
                for i in 0..s {
                    theta[statics[i]] -= step[i];
                    v[statics[i]] -= step[s + i];
                }
            }
            if converged {
                return Ok(());
            }
        }
        Err(SimError::StaticRebalance { t })
    }

    /// Instantaneous absorbed power at the load buses for a state (network
    /// delivery plus SVC injection on the reactive side).
    pub fn load_power(&self, state: &SystemState) -> (DVector<f64>, DVector<f64>) {
        let (theta, v) = self.full_profile(state);
        let (p, mut q) = power_injections(&theta, &v, &self.net.ybus, &self.load_pos);
        for (s, svc) in self.net.case.svcs.iter().enumerate() {
            if self.svc_enabled[s] {
                let k = self.svc_pos_in_loads[s];
                q[k] += svc.q_injection(state.svc_alpha[s], state.v[k]);
            }
        }
        (p, q)
    }

    /// SVC reactive injections for a state (zero for disabled units).
    pub fn svc_injections(&self, state: &SystemState) -> DVector<f64> {
        DVector::from_fn(self.net.case.svcs.len(), |s, _| {
            if self.svc_enabled[s] {
                let k = self.svc_pos_in_loads[s];
                self.net.case.svcs[s].q_injection(state.svc_alpha[s], state.v[k])
            } else {
                0.0
            }
        })
    }

    /// One Euler-Maruyama substep. Returns the successor state and the
    /// instantaneous demand powers that drove it (the quantities whose
    /// interval averages become the p/q measurement channels).
    pub fn step(
        &self,
        state: &SystemState,
        dt: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<(SystemState, DVector<f64>, DVector<f64>), SimError> {
        assert!(dt > 0.0, "dt must be positive");
        let m = self.load_pos.len();
        let mut next = state.clone();

        // Rebalance statics at the current load state, then evaluate power.
        let (mut theta_full, mut v_full) = self.full_profile(state);
        self.solve_statics(&mut theta_full, &mut v_full, state.t)?;
        for (k, &p) in self.static_pos.iter().enumerate() {
            next.static_theta[k] = theta_full[p];
            next.static_v[k] = v_full[p];
        }
        let (p_net, mut q_tot) =
            power_injections(&theta_full, &v_full, &self.net.ybus, &self.load_pos);
        for (s, svc) in self.net.case.svcs.iter().enumerate() {
            if self.svc_enabled[s] {
                let k = self.svc_pos_in_loads[s];
                q_tot[k] += svc.q_injection(state.svc_alpha[s], v_full[self.load_pos[k]]);
            }
        }

        let sqrt_dt = dt.sqrt();
        let mut p_drive = DVector::zeros(m);
        let mut q_drive = DVector::zeros(m);
        for k in 0..m {
            let e_p: f64 = rng.sample(StandardNormal);
            let e_q: f64 = rng.sample(StandardNormal);
            next.theta[k] = state.theta[k]
                + dt * self.inv_tau_theta[k] * (p_net[k] - self.ps[k])
                - self.noise_p[k] * sqrt_dt * e_p;
            next.v[k] = state.v[k]
                + dt * self.inv_tau_v[k] * (q_tot[k] - self.qs[k])
                - self.noise_q[k] * sqrt_dt * e_q;
            // Demand the recovery integrated over this step, exactly:
            // d(theta) = dt/tau (p_drive - ps), d(v) = dt/tau (q_drive - qs).
            p_drive[k] = p_net[k] - self.noise_p[k] * e_p / (sqrt_dt * self.inv_tau_theta[k]);
            q_drive[k] = q_tot[k] - self.noise_q[k] * e_q / (sqrt_dt * self.inv_tau_v[k]);
            if !(next.theta[k].is_finite() && next.v[k].is_finite()) {
                return Err(SimError::IntegrationDiverged {
                    bus: self.net.index.ids[self.load_pos[k]],
                    t: state.t,
                });
            }
        }

        for (s, svc) in self.net.case.svcs.iter().enumerate() {
            if !self.svc_enabled[s] || self.svc_hold {
                continue;
            }
            let k = self.svc_pos_in_loads[s];
            let vk = state.v[k];
            let vm = state.svc_vm[s];
            let alpha = state.svc_alpha[s];
            let vref = state.svc_vref[s];
            next.svc_vm[s] = vm + dt * (svc.k_m * vk - vm) / svc.t_m;
            let washout = svc.k * svc.t1 / (svc.t2 * svc.t_m) * (vm - svc.k_m * vk);
            let dalpha = (-svc.k_d * alpha + washout) / svc.t2 + svc.k / svc.t2 * (vref - vm);
            next.svc_alpha[s] = (alpha + dt * dalpha).clamp(svc.alpha_min, svc.alpha_max);
        }

        next.t = state.t + dt;
        Ok((next, p_drive, q_drive))
    }

    /// Applies a scenario event to the simulator and state.
    pub fn apply_event(
        &mut self,
        kind: &EventKind,
        state: &mut SystemState,
    ) -> Result<(), SimError> {
        match kind {
            EventKind::LoadStep {
                buses,
                dp_frac,
                dq_frac,
            } => {
                let targets = buses.resolve(&self.load_ids(), &self.enabled_svc_buses());
                self.net.case.apply_load_step(&targets, *dp_frac, *dq_frac);
                self.reload_setpoints();
            }
            EventKind::LineTrip { from, to } => {
                self.net.case.trip_branch(*from, *to)?;
                self.net.refresh()?;
            }
            EventKind::SetVref { bus, value } => {
                let Some(s) = self.net.case.svcs.iter().position(|s| s.bus == *bus) else {
                    return Err(SimError::Scenario(format!("no svc at bus {bus}")));
                };
                state.svc_vref[s] = *value;
            }
        }
        Ok(())
    }

    fn reload_setpoints(&mut self) {
        for (k, &pos) in self.load_pos.iter().enumerate() {
            let load = self.net.case.buses[pos].load.as_ref().expect("load bus");
            self.ps[k] = load.ps;
            self.qs[k] = load.qs;
            self.noise_p[k] = load.ps * load.sigma_p * self.inv_tau_theta[k];
            self.noise_q[k] = load.qs * load.sigma_q * self.inv_tau_v[k];
        }
    }

    /// Open-loop scenario run from the given initial state: integrates,
    /// applies each event at the first substep reaching its timestamp, and
    /// records the truth measurement window.
    pub fn run(
        &mut self,
        scenario: &Scenario,
        initial: &SystemState,
        rng: &mut ChaCha12Rng,
    ) -> Result<RunOutput, SimError> {
        let dt = scenario.dt_s;
        let rate = scenario.sample_rate_hz;
        let substeps = (1.0 / (rate * dt)).round() as usize;
        if substeps == 0 || ((substeps as f64) * rate * dt - 1.0).abs() > 1e-9 {
            return Err(SimError::Scenario(format!(
                "dt {dt} does not evenly divide the sample interval 1/{rate}"
            )));
        }
        let n_samples = (scenario.duration_s * rate).round() as usize;
        let m = self.n_loads();

        let mut events: Vec<(f64, EventKind)> = scenario
            .events
            .iter()
            .map(|e| (e.at_s, e.kind.clone()))
            .collect();
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut next_event = 0usize;

        let mut window = PmuWindow {
            sample_rate: rate,
            t0: initial.t,
            bus_ids: self.load_ids(),
            theta: DMatrix::zeros(n_samples, m),
            v: DMatrix::zeros(n_samples, m),
            p: Some(DMatrix::zeros(n_samples, m)),
            q: Some(DMatrix::zeros(n_samples, m)),
        };

        let mut state = initial.clone();
        for row in 0..n_samples {
            let mut p_acc = DVector::zeros(m);
            let mut q_acc = DVector::zeros(m);
            for _ in 0..substeps {
                while next_event < events.len() && state.t >= events[next_event].0 - 1e-12 {
                    let kind = events[next_event].1.clone();
                    self.apply_event(&kind, &mut state)?;
                    next_event += 1;
                }
                let (next, p_drive, q_drive) = self.step(&state, dt, rng)?;
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
        }
        Ok(RunOutput {
            window,
            final_state: state,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub window: PmuWindow,
    pub final_state: SystemState,
}

/// Neutral parking angle for an SVC (shared shorthand).
trait SvcParamsExt {
    fn park_angle(&self) -> f64;
}

impl SvcParamsExt for crate::net::SvcParams {
    fn park_angle(&self) -> f64 {
        self.neutral_alpha()
    }
}
