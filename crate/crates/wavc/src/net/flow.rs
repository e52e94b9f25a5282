//! Power injections, analytic Jacobians, and the Newton power flow.

use super::{AdmittanceMatrix, NetError, Network, SvcParams};
use nalgebra::{DMatrix, DVector};

/// Absorption-positive injections at the listed bus positions:
///
/// ```text
/// P_k = sum_j V_k V_j (-G_kj cos t_kj - B_kj sin t_kj)
/// Q_k = sum_j V_k V_j (-G_kj sin t_kj + B_kj cos t_kj),   t_kj = t_k - t_j
/// ```
pub fn power_injections(
    theta: &DVector<f64>,
    v: &DVector<f64>,
    y: &AdmittanceMatrix,
    rows: &[usize],
) -> (DVector<f64>, DVector<f64>) {
    let n = y.g.nrows();
    debug_assert_eq!(theta.len(), n);
    debug_assert_eq!(v.len(), n);
    let sin: Vec<f64> = theta.iter().map(|t| t.sin()).collect();
    let cos: Vec<f64> = theta.iter().map(|t| t.cos()).collect();
    let mut p = DVector::zeros(rows.len());
    let mut q = DVector::zeros(rows.len());
    for (out, &k) in rows.iter().enumerate() {
        let (mut pk, mut qk) = (0.0, 0.0);
        for j in 0..n {
            let g = y.g[(k, j)];
            let b = y.b[(k, j)];
            if g == 0.0 && b == 0.0 {
                continue;
            }
            // cos(t_k - t_j), sin(t_k - t_j) from per-bus tables.
            let ckj = cos[k] * cos[j] + sin[k] * sin[j];
            let skj = sin[k] * cos[j] - cos[k] * sin[j];
            let vv = v[k] * v[j];
            pk += vv * (-g * ckj - b * skj);
            qk += vv * (-g * skj + b * ckj);
        }
        p[out] = pk;
        q[out] = qk;
    }
    (p, q)
}

/// Partial derivatives of the absorption-positive injections at `rows`
/// with respect to the angle and magnitude of the buses in `cols`.
#[derive(Debug, Clone)]
pub struct JacobianBlocks {
    pub jp_theta: DMatrix<f64>,
    pub jp_v: DMatrix<f64>,
    pub jq_theta: DMatrix<f64>,
    pub jq_v: DMatrix<f64>,
}

impl JacobianBlocks {
    /// Stacks the blocks into `[[jp_theta, jp_v], [jq_theta, jq_v]]`.
    pub fn assemble(&self) -> DMatrix<f64> {
        let (r, c) = (self.jp_theta.nrows(), self.jp_theta.ncols());
        let mut j = DMatrix::zeros(2 * r, 2 * c);
        j.view_mut((0, 0), (r, c)).copy_from(&self.jp_theta);
        j.view_mut((0, c), (r, c)).copy_from(&self.jp_v);
        j.view_mut((r, 0), (r, c)).copy_from(&self.jq_theta);
        j.view_mut((r, c), (r, c)).copy_from(&self.jq_v);
        j
    }
}

pub fn injection_jacobian(
    theta: &DVector<f64>,
    v: &DVector<f64>,
    y: &AdmittanceMatrix,
    rows: &[usize],
    cols: &[usize],
) -> JacobianBlocks {
    let n = y.g.nrows();
    let sin: Vec<f64> = theta.iter().map(|t| t.sin()).collect();
    let cos: Vec<f64> = theta.iter().map(|t| t.cos()).collect();
    let mut jp_theta = DMatrix::zeros(rows.len(), cols.len());
    let mut jp_v = DMatrix::zeros(rows.len(), cols.len());
    let mut jq_theta = DMatrix::zeros(rows.len(), cols.len());
    let mut jq_v = DMatrix::zeros(rows.len(), cols.len());

    // f = -G cos - B sin drives P, h = -G sin + B cos drives Q, and the
    // angle derivatives close on each other: f' = -h, h' = f.
    for (ri, &k) in rows.iter().enumerate() {
        // Row sums of f and h excluding the self term, reused for the
        // diagonal entries.
        let mut sum_vf = 0.0;
        let mut sum_vh = 0.0;
        for j in 0..n {
            if j == k {
                continue;
            }
            let g = y.g[(k, j)];
            let b = y.b[(k, j)];
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let ckj = cos[k] * cos[j] + sin[k] * sin[j];
            let skj = sin[k] * cos[j] - cos[k] * sin[j];
            sum_vf += v[j] * (-g * ckj - b * skj);
            sum_vh += v[j] * (-g * skj + b * ckj);
        }
        for (ci, &l) in cols.iter().enumerate() {
            if l == k {
                let gkk = y.g[(k, k)];
                let bkk = y.b[(k, k)];
                jp_theta[(ri, ci)] = -v[k] * sum_vh;
                jq_theta[(ri, ci)] = v[k] * sum_vf;
                jp_v[(ri, ci)] = sum_vf - 2.0 * v[k] * gkk;
                jq_v[(ri, ci)] = sum_vh + 2.0 * v[k] * bkk;
            } else {
                let g = y.g[(k, l)];
                let b = y.b[(k, l)];
                let ckl = cos[k] * cos[l] + sin[k] * sin[l];
                let skl = sin[k] * cos[l] - cos[k] * sin[l];
                let f = -g * ckl - b * skl;
                let h = -g * skl + b * ckl;
                jp_theta[(ri, ci)] = v[k] * v[l] * h;
                jq_theta[(ri, ci)] = -v[k] * v[l] * f;
                jp_v[(ri, ci)] = v[k] * f;
                jq_v[(ri, ci)] = v[k] * h;
            }
        }
    }
    JacobianBlocks {
        jp_theta,
        jp_v,
        jq_theta,
        jq_v,
    }
}

/// How the power flow treats SVCs.
#[derive(Debug, Clone)]
pub enum SvcDispatch {
    /// No SVC injection at all.
    Off,
    /// Firing angles pinned; the injection enters the balance but the
    /// regulator equation does not.
    FixedAlpha(Vec<f64>),
    /// Regulated: firing angles are solved against the given references,
    /// saturating at the angle limits.
    Regulated(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub svc: SvcDispatch,
    /// Start from the case voltage profile instead of a flat start.
    pub warm_start: Option<(DVector<f64>, DVector<f64>)>,
}

impl SolveOptions {
    pub fn from_case(net: &Network, svc: SvcDispatch) -> Self {
        let cfg = net.case.solver_config();
        SolveOptions {
            tol: cfg.tol,
            max_iter: cfg.max_iter,
            svc,
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    /// Angles at every bus, case order.
    pub theta: DVector<f64>,
    /// Magnitudes at every bus, case order.
    pub v: DVector<f64>,
    /// Firing angle per SVC (case order of `svcs`); empty when SVCs are off.
    pub svc_alpha: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Newton power flow over the load and static buses, generator buses held
/// fixed. With `SvcDispatch::Regulated` the firing angles join the unknown
/// vector, with saturation handled by pinning angles at their limits.
pub fn solve_power_flow(net: &Network, options: &SolveOptions) -> Result<PowerFlowSolution, NetError> {
    let index = &net.index;
    let case = &net.case;
    let n = index.n_buses();

    // Fixed values at generator buses, profile elsewhere.
    let mut theta = DVector::zeros(n);
    let mut v = DVector::from_element(n, 1.0);
    for bus in &case.buses {
        let p = index.pos[&bus.id];
        theta[p] = 0.0;
        v[p] = 1.0;
    }
    for gen in &case.generators {
        let p = index.pos[&gen.bus];
        theta[p] = gen.theta;
        v[p] = gen.v;
    }
    if let Some((t0, v0)) = &options.warm_start {
        theta.copy_from(t0);
        v.copy_from(v0);
        for gen in &case.generators {
            let p = index.pos[&gen.bus];
            theta[p] = gen.theta;
            v[p] = gen.v;
        }
    }

    // Unknown buses: dynamic loads then statics, in case order.
    let pq: Vec<usize> = index
        .load_pos
        .iter()
        .chain(index.static_pos.iter())
        .copied()
        .collect();
    let npq = pq.len();

    // Load setpoints per pq bus (statics are zero-injection junctions).
    let mut ps = DVector::zeros(npq);
    let mut qs = DVector::zeros(npq);
    for (i, &p) in pq.iter().enumerate() {
        if let Some(load) = &case.buses[p].load {
            ps[i] = load.ps;
            qs[i] = load.qs;
        }
    }

    let svc_bus: Vec<usize> = case
        .svcs
        .iter()
        .map(|s| index.pos[&s.bus])
        .collect();
    // Map svc -> local pq row of its host bus.
    let svc_row: Vec<usize> = svc_bus
        .iter()
        .map(|b| pq.iter().position(|p| p == b).expect("svc host is a load bus"))
        .collect();

    let (mut alpha, regulated, vref): (Vec<f64>, bool, Vec<f64>) = match &options.svc {
        SvcDispatch::Off => (vec![], false, vec![]),
        SvcDispatch::FixedAlpha(a) => (a.clone(), false, vec![]),
        SvcDispatch::Regulated(vref) => (
            case.svcs.iter().map(SvcParams::neutral_alpha).collect(),
            true,
            vref.clone(),
        ),
    };
    let svc_active = !matches!(options.svc, SvcDispatch::Off);
    // Saturated SVCs leave the unknown set with alpha pinned at a limit.
    let mut pinned: Vec<Option<f64>> = vec![None; alpha.len()];

    for _pass in 0..=alpha.len() {
        let free: Vec<usize> = (0..alpha.len()).filter(|&s| pinned[s].is_none()).collect();
        let nfree = if regulated { free.len() } else { 0 };
        let dim = 2 * npq + nfree;
        let mut iterations = 0;
        let mut residual;

        loop {
            let (p_inj, q_inj) = power_injections(&theta, &v, &net.ybus, &pq);
            let mut res = DVector::zeros(dim);
            for i in 0..npq {
                res[i] = p_inj[i] - ps[i];
                res[npq + i] = q_inj[i] - qs[i];
            }
            if svc_active {
                for (s, svc) in case.svcs.iter().enumerate() {
                    let vb = v[svc_bus[s]];
                    res[npq + svc_row[s]] += svc.q_injection(alpha[s], vb);
                }
            }
            if regulated {
                for (fi, &s) in free.iter().enumerate() {
                    let svc = &case.svcs[s];
                    let vb = v[svc_bus[s]];
                    res[2 * npq + fi] = svc.k_d * alpha[s] - svc.k * (vref[s] - svc.k_m * vb);
                }
            }
            residual = res.amax();
            if !residual.is_finite() {
                return Err(NetError::NonConvergence {
                    iterations,
                    residual,
                });
            }
            if residual < options.tol {
                break;
            }
            if iterations >= options.max_iter {
                return Err(NetError::NonConvergence {
                    iterations,
                    residual,
                });
            }

            let blocks = injection_jacobian(&theta, &v, &net.ybus, &pq, &pq);
            let mut jac = DMatrix::zeros(dim, dim);
            jac.view_mut((0, 0), (npq, npq)).copy_from(&blocks.jp_theta);
            jac.view_mut((0, npq), (npq, npq)).copy_from(&blocks.jp_v);
            jac.view_mut((npq, 0), (npq, npq))
                .copy_from(&blocks.jq_theta);
            jac.view_mut((npq, npq), (npq, npq)).copy_from(&blocks.jq_v);
            if svc_active {
                for (s, svc) in case.svcs.iter().enumerate() {
                    let vb = v[svc_bus[s]];
                    let row = npq + svc_row[s];
                    jac[(row, npq + svc_row[s])] += 2.0 * svc.q_injection(alpha[s], vb) / vb;
                    if regulated {
                        if let Some(fi) = free.iter().position(|&f| f == s) {
                            jac[(row, 2 * npq + fi)] = svc.dq_dalpha(alpha[s], vb);
                            jac[(2 * npq + fi, 2 * npq + fi)] = svc.k_d;
                            jac[(2 * npq + fi, npq + svc_row[s])] = svc.k * svc.k_m;
                        }
                    }
                }
            }

            let lu = jac.lu();
            let step = lu.solve(&res).ok_or(NetError::SingularJacobian)?;
            for i in 0..npq {
                theta[pq[i]] -= step[i];
                v[pq[i]] -= step[npq + i];
            }
            if regulated {
                for (fi, &s) in free.iter().enumerate() {
                    alpha[s] -= step[2 * npq + fi];
                }
            }
            iterations += 1;
        }

        // Enforce firing angle limits; re-solve with offenders pinned.
        let mut newly_pinned = false;
        if regulated {
            for &s in &free {
                let svc = &case.svcs[s];
                if alpha[s] < svc.alpha_min {
                    alpha[s] = svc.alpha_min;
                    pinned[s] = Some(svc.alpha_min);
                    newly_pinned = true;
                } else if alpha[s] > svc.alpha_max {
                    alpha[s] = svc.alpha_max;
                    pinned[s] = Some(svc.alpha_max);
                    newly_pinned = true;
                }
            }
        }
        if !newly_pinned {
            return Ok(PowerFlowSolution {
                theta,
                v,
                svc_alpha: alpha,
                iterations,
                residual,
            });
        }
    }
    unreachable!("active-set loop bounded by the number of SVCs")
}

/// Load-bus sensitivity blocks at the given operating point, with the
/// static junctions eliminated: the returned blocks map changes at the
/// dynamic load buses to their injection changes while statics rebalance.
pub fn effective_load_jacobian(
    net: &Network,
    theta: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<JacobianBlocks, NetError> {
    let index = &net.index;
    let m = index.load_pos.len();
    let s = index.static_pos.len();
    let loads = &index.load_pos;
    let statics = &index.static_pos;

    let jll = injection_jacobian(theta, v, &net.ybus, loads, loads);
    if s == 0 {
        return Ok(jll);
    }
    let jls = injection_jacobian(theta, v, &net.ybus, loads, statics);
    let jsl = injection_jacobian(theta, v, &net.ybus, statics, loads);
    let jss = injection_jacobian(theta, v, &net.ybus, statics, statics);

    let full_ll = jll.assemble();
    let full_ls = jls.assemble();
    let full_sl = jsl.assemble();
    let full_ss = jss.assemble();
    let reduced = &full_ll
        - &full_ls
            * full_ss
                .lu()
                .solve(&full_sl)
                .ok_or(NetError::SingularJacobian)?;

    Ok(JacobianBlocks {
        jp_theta: reduced.view((0, 0), (m, m)).into_owned(),
        jp_v: reduced.view((0, m), (m, m)).into_owned(),
        jq_theta: reduced.view((m, 0), (m, m)).into_owned(),
        jq_v: reduced.view((m, m), (m, m)).into_owned(),
    })
}

/// Apparent power magnitude at the sending end of each in-service branch,
/// in case branch order paired with the branch index.
pub fn branch_apparent_flows(
    net: &Network,
    theta: &DVector<f64>,
    v: &DVector<f64>,
) -> Vec<(usize, f64)> {
    let index = &net.index;
    let mut flows = Vec::new();
    for (bi, branch) in net.case.branches.iter().enumerate() {
        if !branch.in_service {
            continue;
        }
        let i = index.pos[&branch.from];
        let j = index.pos[&branch.to];
        let den = branch.r * branch.r + branch.x * branch.x;
        let (gy, by) = (branch.r / den, -branch.x / den);
        // Complex bus voltages.
        let (vi_re, vi_im) = (v[i] * theta[i].cos(), v[i] * theta[i].sin());
        let (vj_re, vj_im) = (v[j] * theta[j].cos(), v[j] * theta[j].sin());
        // I_from = y (V_i - V_j) + j b/2 V_i.
        let (dre, dim) = (vi_re - vj_re, vi_im - vj_im);
        let mut ire = gy * dre - by * dim;
        let mut iim = gy * dim + by * dre;
        ire += -branch.b_shunt / 2.0 * vi_im;
        iim += branch.b_shunt / 2.0 * vi_re;
        // S = V_i conj(I).
        let s_re = vi_re * ire + vi_im * iim;
        let s_im = vi_im * ire - vi_re * iim;
        flows.push((bi, (s_re * s_re + s_im * s_im).sqrt()));
    }
    flows
}
