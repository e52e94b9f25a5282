//! Static network model: case description, admittance assembly, power
//! injections, analytic Jacobians, and the steady-state power flow.
//!
//! Conventions: per-unit on the case base, angles in radians. Power at a
//! bus is the absorption from the network (injection into the bus counts
//! positive), which keeps the load recovery dynamics stable with a
//! negative-definite voltage sensitivity.
//!
//! Bus roles: `generator` buses are fixed voltage sources, `dynamic_load`
//! buses carry the recovery dynamics and are the measured/controlled set,
//! `static` buses are zero-injection junctions solved algebraically.

mod flow;
mod ybus;

pub use flow::{
    branch_apparent_flows, effective_load_jacobian, injection_jacobian, power_injections,
    solve_power_flow, JacobianBlocks, PowerFlowSolution, SolveOptions, SvcDispatch,
};
pub use ybus::{build_admittance, AdmittanceMatrix};

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("duplicate bus id {0}")]
    DuplicateBus(BusId),
    #[error("branch endpoint references unknown bus {0}")]
    UnknownBus(BusId),
    #[error("branch {from}-{to} has zero impedance")]
    ZeroImpedance { from: BusId, to: BusId },
    #[error("branch {from}-{to} not found")]
    UnknownBranch { from: BusId, to: BusId },
    #[error("bus {0}: {1}")]
    InvalidBus(BusId, String),
    #[error("svc at bus {0}: {1}")]
    InvalidSvc(BusId, String),
    #[error("case must designate exactly one generator with fixed angle 0 (found {0})")]
    AngleReference(usize),
    #[error("generator list and bus kinds disagree at bus {0}")]
    GeneratorMismatch(BusId),
    #[error("power flow did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular power flow Jacobian")]
    SingularJacobian,
    #[error("state dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// External bus identifier as it appears in case files.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Generator,
    DynamicLoad,
    Static,
}

/// Dynamic load recovery parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LoadParams {
    /// Active power recovery time constant, seconds.
    pub tau_theta: f64,
    /// Reactive power recovery time constant, seconds.
    pub tau_v: f64,
    /// Steady-state active power absorption, p.u.
    pub ps: f64,
    /// Steady-state reactive power absorption, p.u.
    pub qs: f64,
    /// Relative std of the stochastic active power perturbation.
    #[serde(default)]
    pub sigma_p: f64,
    /// Relative std of the stochastic reactive power perturbation.
    #[serde(default)]
    pub sigma_q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    /// Initial voltage magnitude profile, p.u.
    #[serde(default = "one")]
    pub v0: f64,
    /// Initial voltage angle profile, rad.
    #[serde(default)]
    pub theta0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load: Option<LoadParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance, split evenly between the ends.
    #[serde(default)]
    pub b_shunt: f64,
    #[serde(default = "yes")]
    pub in_service: bool,
}

/// Static VAR compensator: thyristor-controlled reactor with a fixed
/// capacitor, regulated by a reference voltage through the firing angle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvcParams {
    pub bus: BusId,
    #[serde(default = "one")]
    pub k_m: f64,
    #[serde(default = "default_kd")]
    pub k_d: f64,
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default = "default_tm")]
    pub t_m: f64,
    #[serde(default = "default_t1")]
    pub t1: f64,
    #[serde(default = "default_t2")]
    pub t2: f64,
    #[serde(default = "default_xl")]
    pub x_l: f64,
    #[serde(default = "default_xc")]
    pub x_c: f64,
    #[serde(default = "default_alpha_min")]
    pub alpha_min: f64,
    #[serde(default = "default_alpha_max")]
    pub alpha_max: f64,
    /// Initial reference voltage. When absent it is initialised to the
    /// self-consistent value at the solved operating point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vref0: Option<f64>,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_kd() -> f64 {
    0.01
}
fn default_k() -> f64 {
    25.0
}
fn default_tm() -> f64 {
    0.01
}
fn default_t1() -> f64 {
    0.1
}
fn default_t2() -> f64 {
    10.0
}
fn default_xl() -> f64 {
    0.2
}
fn default_xc() -> f64 {
    0.1
}
fn default_alpha_min() -> f64 {
    std::f64::consts::FRAC_PI_2
}
fn default_alpha_max() -> f64 {
    std::f64::consts::PI
}

impl SvcParams {
    /// Reactive power injected at the bus for firing angle `alpha` and bus
    /// voltage `v`.
    pub fn q_injection(&self, alpha: f64, v: f64) -> f64 {
        let num = 2.0 * alpha - (2.0 * alpha).sin()
            - std::f64::consts::PI * (2.0 - self.x_l / self.x_c);
        num / (std::f64::consts::PI * self.x_l) * v * v
    }

    /// d q_injection / d alpha at (`alpha`, `v`).
    pub fn dq_dalpha(&self, alpha: f64, v: f64) -> f64 {
        (2.0 - 2.0 * (2.0 * alpha).cos()) / (std::f64::consts::PI * self.x_l) * v * v
    }

    /// Firing angle at which the injection is closest to zero, clamped to
    /// the admissible range.
    pub fn neutral_alpha(&self) -> f64 {
        // q_injection is monotone increasing in alpha on [pi/2, pi]; bisect.
        let (mut lo, mut hi) = (self.alpha_min, self.alpha_max);
        if self.q_injection(lo, 1.0) > 0.0 {
            return lo;
        }
        if self.q_injection(hi, 1.0) < 0.0 {
            return hi;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.q_injection(mid, 1.0) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Fixed voltage source pinning a generator bus.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GeneratorSource {
    pub bus: BusId,
    pub v: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        // Tighter than the contractual 1e-8 so that simulated equilibria
        // are quiet at the 1e-12 per-step level.
        SolverConfig {
            tol: 1e-11,
            max_iter: 50,
        }
    }
}

/// Static network description loaded from a case file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCase {
    pub base_mva: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub svcs: Vec<SvcParams>,
    pub generators: Vec<GeneratorSource>,
}

impl GridCase {
    pub fn from_json(text: &str) -> Result<Self, NetError> {
        let case: GridCase = serde_json::from_str(text)?;
        case.validate()?;
        Ok(case)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serialization cannot fail")
    }

    pub fn solver_config(&self) -> SolverConfig {
        self.solver.unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.base_mva > 0.0) {
            return Err(NetError::InvalidBus(
                BusId(0),
                "base_mva must be positive".into(),
            ));
        }
        let mut seen = HashMap::new();
        for bus in &self.buses {
            if seen.insert(bus.id, ()).is_some() {
                return Err(NetError::DuplicateBus(bus.id));
            }
            match (bus.kind, &bus.load) {
                (BusKind::DynamicLoad, Some(load)) => {
                    if !(load.tau_theta > 0.0 && load.tau_v > 0.0) {
                        return Err(NetError::InvalidBus(
                            bus.id,
                            "load time constants must be positive".into(),
                        ));
                    }
                    if load.sigma_p < 0.0 || load.sigma_q < 0.0 {
                        return Err(NetError::InvalidBus(
                            bus.id,
                            "load noise levels must be non-negative".into(),
                        ));
                    }
                }
                (BusKind::DynamicLoad, None) => {
                    return Err(NetError::InvalidBus(
                        bus.id,
                        "dynamic load bus without load parameters".into(),
                    ))
                }
                (_, Some(_)) => {
                    return Err(NetError::InvalidBus(
                        bus.id,
                        "load parameters on a non-load bus".into(),
                    ))
                }
                _ => {}
            }
        }
        for branch in &self.branches {
            for end in [branch.from, branch.to] {
                if !seen.contains_key(&end) {
                    return Err(NetError::UnknownBus(end));
                }
            }
            if branch.r == 0.0 && branch.x == 0.0 {
                return Err(NetError::ZeroImpedance {
                    from: branch.from,
                    to: branch.to,
                });
            }
            if branch.x == 0.0 || branch.r < 0.0 {
                return Err(NetError::InvalidBus(
                    branch.from,
                    format!("branch to {} needs x != 0 and r >= 0", branch.to),
                ));
            }
        }
        // Generators and bus kinds must agree, with exactly one angle reference.
        let gen_buses: HashMap<BusId, &GeneratorSource> =
            self.generators.iter().map(|g| (g.bus, g)).collect();
        for bus in &self.buses {
            let is_gen = bus.kind == BusKind::Generator;
            if is_gen != gen_buses.contains_key(&bus.id) {
                return Err(NetError::GeneratorMismatch(bus.id));
            }
        }
        for gen in &self.generators {
            if !seen.contains_key(&gen.bus) {
                return Err(NetError::UnknownBus(gen.bus));
            }
        }
        let refs = self.generators.iter().filter(|g| g.theta == 0.0).count();
        if refs != 1 {
            return Err(NetError::AngleReference(refs));
        }
        for svc in &self.svcs {
            if !seen.contains_key(&svc.bus) {
                return Err(NetError::UnknownBus(svc.bus));
            }
            let host = self.buses.iter().find(|b| b.id == svc.bus).unwrap();
            if host.kind != BusKind::DynamicLoad {
                return Err(NetError::InvalidSvc(
                    svc.bus,
                    "svc host must be a dynamic load bus".into(),
                ));
            }
            if !(svc.t_m > 0.0 && svc.t2 > 0.0) {
                return Err(NetError::InvalidSvc(
                    svc.bus,
                    "regulator time constants must be positive".into(),
                ));
            }
            if !(svc.x_l > 0.0 && svc.x_c > 0.0) {
                return Err(NetError::InvalidSvc(
                    svc.bus,
                    "reactances must be positive".into(),
                ));
            }
            if svc.alpha_min >= svc.alpha_max {
                return Err(NetError::InvalidSvc(
                    svc.bus,
                    "alpha_min must be below alpha_max".into(),
                ));
            }
        }
        Ok(())
    }

    /// Scales the load setpoints at `buses` by `(1 + dp_frac, 1 + dq_frac)`.
    pub fn apply_load_step(&mut self, buses: &[BusId], dp_frac: f64, dq_frac: f64) {
        for bus in &mut self.buses {
            if buses.contains(&bus.id) {
                if let Some(load) = &mut bus.load {
                    load.ps *= 1.0 + dp_frac;
                    load.qs *= 1.0 + dq_frac;
                }
            }
        }
    }

    /// Takes the first in-service branch between `from` and `to` out of
    /// service (either orientation).
    pub fn trip_branch(&mut self, from: BusId, to: BusId) -> Result<(), NetError> {
        for branch in &mut self.branches {
            let hit = (branch.from == from && branch.to == to)
                || (branch.from == to && branch.to == from);
            if hit && branch.in_service {
                branch.in_service = false;
                return Ok(());
            }
        }
        Err(NetError::UnknownBranch { from, to })
    }
}

/// Position maps derived from a validated case. Bus positions follow case
/// order; the per-role vectors index into that ordering.
#[derive(Debug, Clone)]
pub struct CaseIndex {
    pub ids: Vec<BusId>,
    pub pos: HashMap<BusId, usize>,
    /// Positions of dynamic load buses, in case order.
    pub load_pos: Vec<usize>,
    /// Positions of static (zero-injection) buses.
    pub static_pos: Vec<usize>,
    /// Positions of generator buses.
    pub gen_pos: Vec<usize>,
}

impl CaseIndex {
    pub fn new(case: &GridCase) -> Self {
        let ids: Vec<BusId> = case.buses.iter().map(|b| b.id).collect();
        let pos: HashMap<BusId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut load_pos = Vec::new();
        let mut static_pos = Vec::new();
        let mut gen_pos = Vec::new();
        for (i, bus) in case.buses.iter().enumerate() {
            match bus.kind {
                BusKind::DynamicLoad => load_pos.push(i),
                BusKind::Static => static_pos.push(i),
                BusKind::Generator => gen_pos.push(i),
            }
        }
        CaseIndex {
            ids,
            pos,
            load_pos,
            static_pos,
            gen_pos,
        }
    }

    pub fn n_buses(&self) -> usize {
        self.ids.len()
    }

    pub fn n_loads(&self) -> usize {
        self.load_pos.len()
    }

    /// Ids of the dynamic load buses in measurement order.
    pub fn load_ids(&self) -> Vec<BusId> {
        self.load_pos.iter().map(|&p| self.ids[p]).collect()
    }

    pub fn position(&self, id: BusId) -> Result<usize, NetError> {
        self.pos.get(&id).copied().ok_or(NetError::UnknownBus(id))
    }
}

/// A validated case bundled with its index and admittance matrix.
#[derive(Debug, Clone)]
pub struct Network {
    pub case: GridCase,
    pub index: CaseIndex,
    pub ybus: AdmittanceMatrix,
}

impl Network {
    pub fn new(case: GridCase) -> Result<Self, NetError> {
        case.validate()?;
        let index = CaseIndex::new(&case);
        let ybus = build_admittance(&case, &index)?;
        Ok(Network { case, index, ybus })
    }

    /// Rebuilds the admittance matrix after topology or service changes.
    pub fn refresh(&mut self) -> Result<(), NetError> {
        self.ybus = build_admittance(&self.case, &self.index)?;
        Ok(())
    }
}
