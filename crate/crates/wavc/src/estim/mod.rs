//! Sensitivity identification from ambient measurement windows.
//!
//! The chain: sample statistics of the stacked state `[theta; v]`, the
//! scaled state matrix from the one-lag regression `A = log(G C^-1) / dt`,
//! load time constants from the per-bus recovery regression, then the
//! Jacobian blocks `J = diag(T) A` and their inverse `S = J^-1`, block
//! partitioning by controlled/uncontrolled bus sets, and the reduction
//! that drops buses without PMUs. Least-squares and total-least-squares
//! baselines over sample differences are provided for comparison.

mod baseline;

pub use baseline::{estimate_ls, estimate_tls, lsq_samples_from_window};

use crate::linalg::{self, LinalgError};
use crate::net::BusId;
use crate::sim::PmuWindow;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimError {
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("window lacks power channels required by the regression")]
    MissingPowerChannels,
    #[error(
        "sample covariance is numerically singular (condition {condition:.3e}); \
         most collinear channels: {a} and {b}"
    )]
    SingularCovariance { condition: f64, a: String, b: String },
    #[error("matrix log input has a near-zero eigenvalue (|lambda| = {0:.3e})")]
    SingularInput(f64),
    #[error(
        "eigenvector condition {condition:.3e} marks the matrix as defective; \
         a longer window usually fixes this"
    )]
    IllConditioned { condition: f64 },
    #[error("time constant at bus {0} unidentifiable: no power excursion in the window")]
    UnidentifiableTimeConstant(BusId),
    #[error("time constants must be positive (bus {0})")]
    NonPositiveTimeConstant(BusId),
    #[error("estimated Jacobian is singular (condition {0:.3e})")]
    SingularSensitivity(f64),
    #[error("bus {0} appears in both partitions")]
    PartitionOverlap(BusId),
    #[error("bus {0} is not part of the estimate")]
    UnknownBus(BusId),
    #[error("no controlled bus retains a PMU; controller disabled")]
    NoControlledBuses,
    #[error("sample matrix rank {rank} below required {needed}")]
    RankDeficient { rank: usize, needed: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Sample statistics of a measurement window: mean, covariance, and the
/// lag covariance over the stacked state `[theta; v]`.
#[derive(Debug, Clone)]
pub struct SampleStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub lag_cov: DMatrix<f64>,
    /// Lag interval in seconds.
    pub dt: f64,
    pub n: usize,
    /// Channel labels (`theta@bus`, `v@bus`) for diagnostics.
    pub channels: Vec<String>,
}

/// Statistics with the default one-sample lag.
pub fn sample_stats(window: &PmuWindow) -> Result<SampleStats, EstimError> {
    sample_stats_with_lag(window, 1)
}

/// Mean, covariance (1/(n-1) normalisation), and the `lag`-sample
/// covariance, all centred on the full-window mean.
pub fn sample_stats_with_lag(window: &PmuWindow, lag: usize) -> Result<SampleStats, EstimError> {
    let n = window.n_samples();
    if n < lag + 1 || n < 2 {
        return Err(EstimError::InsufficientData {
            needed: lag + 1,
            got: n,
        });
    }
    let f = window.state_matrix();
    let dim = f.nrows();
    let mean = DVector::from_fn(dim, |i, _| f.row(i).sum() / n as f64);
    let mut centered = f;
    for j in 0..n {
        for i in 0..dim {
            centered[(i, j)] -= mean[i];
        }
    }
    let norm = 1.0 / (n as f64 - 1.0);
    let cov = &centered * centered.transpose() * norm;
    let later = centered.columns(lag, n - lag);
    let earlier = centered.columns(0, n - lag);
    let lag_cov = later * earlier.transpose() * norm;

    let mut channels = Vec::with_capacity(dim);
    for id in &window.bus_ids {
        channels.push(format!("theta@{id}"));
    }
    for id in &window.bus_ids {
        channels.push(format!("v@{id}"));
    }
    Ok(SampleStats {
        mean,
        cov,
        lag_cov,
        dt: lag as f64 * window.dt(),
        n,
        channels,
    })
}

/// Principal matrix logarithm via eigendecomposition. Returns the real
/// part and the Frobenius norm of the imaginary part (nonzero when the
/// spectrum touches the negative real axis, a sign the window is too
/// short or the dynamics are not captured).
pub fn matrix_log(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64), EstimError> {
    let eg = linalg::eigen(m)?;
    for k in 0..eg.re.len() {
        let mag = (eg.re[k] * eg.re[k] + eg.im[k] * eg.im[k]).sqrt();
        if mag < 1e-12 {
            return Err(EstimError::SingularInput(mag));
        }
    }
    let condition = eg
        .vector_condition()
        .ok_or(EstimError::IllConditioned { condition: f64::INFINITY })?;
    if condition > 1e12 {
        return Err(EstimError::IllConditioned { condition });
    }
    let (re, im) = eg.function(|r, i| {
        let mag = 0.5 * (r * r + i * i).ln();
        let phase = i.atan2(r);
        (mag, phase)
    })?;
    Ok((re, im.norm()))
}

#[derive(Debug, Clone)]
pub struct StateMatrixEstimate {
    pub a_hat: DMatrix<f64>,
    /// Frobenius norm of the imaginary part discarded by the matrix log.
    pub log_residual: f64,
    /// Condition number of the sample covariance.
    pub condition: f64,
    /// False when the estimate has a non-decaying mode; downstream layers
    /// decide what to do with it.
    pub stable: bool,
}

/// Scaled state matrix from the one-lag regression,
/// `A = log(G C^-1) / dt`.
pub fn estimate_state_matrix(stats: &SampleStats) -> Result<StateMatrixEstimate, EstimError> {
    let dim = stats.cov.nrows();
    let sym = stats.cov.clone().symmetric_eigen();
    let max_ev = sym.eigenvalues.iter().copied().fold(f64::MIN, f64::max);
    let min_ev = sym.eigenvalues.iter().copied().fold(f64::MAX, f64::min);
    let condition = if min_ev.abs() > 0.0 {
        max_ev / min_ev.abs()
    } else {
        f64::INFINITY
    };
    if !(min_ev > max_ev * 1e-14) {
        let (a, b) = most_collinear_pair(&stats.cov);
        return Err(EstimError::SingularCovariance {
            condition,
            a: stats.channels.get(a).cloned().unwrap_or_else(|| a.to_string()),
            b: stats.channels.get(b).cloned().unwrap_or_else(|| b.to_string()),
        });
    }

    // W = G C^-1 through a solve on the symmetric C: C W^T = G^T.
    let lu = stats.cov.clone().lu();
    let w_t = lu.solve(&stats.lag_cov.transpose()).ok_or_else(|| {
        let (a, b) = most_collinear_pair(&stats.cov);
        EstimError::SingularCovariance {
            condition,
            a: stats.channels[a].clone(),
            b: stats.channels[b].clone(),
        }
    })?;
    let w = w_t.transpose();

    // Spectrum of W decides stability: |lambda| < 1 iff the matching
    // continuous-time eigenvalue has negative real part.
    let eg = linalg::eigen(&w)?;
    let stable = (0..dim).all(|k| (eg.re[k] * eg.re[k] + eg.im[k] * eg.im[k]).sqrt() < 1.0);

    let (log_w, log_residual) = matrix_log(&w)?;
    Ok(StateMatrixEstimate {
        a_hat: log_w / stats.dt,
        log_residual,
        condition,
        stable,
    })
}

fn most_collinear_pair(cov: &DMatrix<f64>) -> (usize, usize) {
    let dim = cov.nrows();
    let mut best = (0, 1.min(dim.saturating_sub(1)));
    let mut best_rho = -1.0;
    for i in 0..dim {
        for j in (i + 1)..dim {
            let den = (cov[(i, i)] * cov[(j, j)]).sqrt();
            if den > 0.0 {
                let rho = (cov[(i, j)] / den).abs();
                if rho > best_rho {
                    best_rho = rho;
                    best = (i, j);
                }
            }
        }
    }
    best
}

/// Per-bus recovery time constants by least squares through the origin:
/// the slope of the state increment rate on the centred power deviation.
/// `sub_samples` restricts the regression to the first p increments of
/// the window; the full window is used when absent.
pub fn estimate_time_constants(
    window: &PmuWindow,
    sub_samples: Option<usize>,
) -> Result<(DVector<f64>, DVector<f64>), EstimError> {
    let (Some(p_ch), Some(q_ch)) = (&window.p, &window.q) else {
        return Err(EstimError::MissingPowerChannels);
    };
    let n = window.n_samples();
    if n < 3 {
        return Err(EstimError::InsufficientData { needed: 3, got: n });
    }
    // Increment i pairs rows (i-1, i); the power channel at row i is the
    // average over exactly that interval.
    let p_cnt = sub_samples.unwrap_or(n - 1).clamp(2, n - 1);
    let dt = window.dt();
    let m = window.n_buses();
    let mut t_theta = DVector::zeros(m);
    let mut t_v = DVector::zeros(m);
    for k in 0..m {
        let mut p_bar = 0.0;
        let mut q_bar = 0.0;
        for i in 1..=p_cnt {
            p_bar += p_ch[(i, k)];
            q_bar += q_ch[(i, k)];
        }
        p_bar /= p_cnt as f64;
        q_bar /= p_cnt as f64;

        let (mut num_p, mut den_p, mut num_q, mut den_q) = (0.0, 0.0, 0.0, 0.0);
        for i in 1..=p_cnt {
            let dtheta = (window.theta[(i, k)] - window.theta[(i - 1, k)]) / dt;
            let dv = (window.v[(i, k)] - window.v[(i - 1, k)]) / dt;
            let dp = p_ch[(i, k)] - p_bar;
            let dq = q_ch[(i, k)] - q_bar;
            num_p += dp * dtheta;
            den_p += dp * dp;
            num_q += dq * dv;
            den_q += dq * dq;
        }
        let bus = window.bus_ids[k];
        if den_p < 1e-14 || den_q < 1e-14 {
            return Err(EstimError::UnidentifiableTimeConstant(bus));
        }
        t_theta[k] = den_p / num_p;
        t_v[k] = den_q / num_q;
    }
    Ok((t_theta, t_v))
}

/// Full estimate bundle for one window.
#[derive(Debug, Clone)]
pub struct SensitivityEstimate {
    pub bus_ids: Vec<BusId>,
    pub a_hat: DMatrix<f64>,
    pub t_theta: DVector<f64>,
    pub t_v: DVector<f64>,
    pub j_hat: DMatrix<f64>,
    pub s_hat: DMatrix<f64>,
    pub log_residual: f64,
    pub condition: f64,
    pub stable: bool,
}

/// Unscale the state matrix into the Jacobian and invert it:
/// `J = diag(T_theta, T_v) A`, `S = J^-1`.
pub fn extract_sensitivities(
    a_hat: &DMatrix<f64>,
    t_theta: &DVector<f64>,
    t_v: &DVector<f64>,
    bus_ids: &[BusId],
) -> Result<(DMatrix<f64>, DMatrix<f64>), EstimError> {
    let m = t_theta.len();
    assert_eq!(a_hat.nrows(), 2 * m, "state matrix must be 2m x 2m");
    for k in 0..m {
        if t_theta[k] <= 0.0 || t_v[k] <= 0.0 {
            return Err(EstimError::NonPositiveTimeConstant(bus_ids[k]));
        }
    }
    let mut j_hat = a_hat.clone();
    for k in 0..m {
        for col in 0..2 * m {
            j_hat[(k, col)] *= t_theta[k];
            j_hat[(m + k, col)] *= t_v[k];
        }
    }
    let lu = j_hat.clone().lu();
    let s_hat = lu
        .try_inverse()
        .ok_or(EstimError::SingularSensitivity(f64::INFINITY))?;
    Ok((j_hat, s_hat))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EstimationOptions {
    /// Restrict the time-constant regression to the first p increments.
    pub regression_samples: Option<usize>,
}

/// Runs the whole identification chain on one window.
pub fn estimate_sensitivities(
    window: &PmuWindow,
    options: &EstimationOptions,
) -> Result<SensitivityEstimate, EstimError> {
    let stats = sample_stats(window)?;
    let state = estimate_state_matrix(&stats)?;
    let (t_theta, t_v) = estimate_time_constants(window, options.regression_samples)?;
    let (j_hat, s_hat) =
        extract_sensitivities(&state.a_hat, &t_theta, &t_v, &window.bus_ids)?;
    Ok(SensitivityEstimate {
        bus_ids: window.bus_ids.clone(),
        a_hat: state.a_hat,
        t_theta,
        t_v,
        j_hat,
        s_hat,
        log_residual: state.log_residual,
        condition: state.condition,
        stable: state.stable,
    })
}

/// Voltage sensitivity blocks reordered by controlled/uncontrolled sets.
/// Blocks are exact sub-selections of `S`; no arithmetic happens here.
#[derive(Debug, Clone)]
pub struct PartitionedS {
    pub controlled: Vec<BusId>,
    pub uncontrolled: Vec<BusId>,
    pub svp_cc: DMatrix<f64>,
    pub svp_cu: DMatrix<f64>,
    pub svp_uc: DMatrix<f64>,
    pub svp_uu: DMatrix<f64>,
    pub svq_cc: DMatrix<f64>,
    pub svq_cu: DMatrix<f64>,
    pub svq_uc: DMatrix<f64>,
    pub svq_uu: DMatrix<f64>,
}

/// Selects the V-row blocks of `s_hat` (2m x 2m over `[theta; v]`) by the
/// two bus sets. Orders inside the blocks follow the given set orders.
pub fn partition(
    s_hat: &DMatrix<f64>,
    bus_ids: &[BusId],
    controlled: &[BusId],
    uncontrolled: &[BusId],
) -> Result<PartitionedS, EstimError> {
    let m = bus_ids.len();
    assert_eq!(s_hat.nrows(), 2 * m);
    for c in controlled {
        if uncontrolled.contains(c) {
            return Err(EstimError::PartitionOverlap(*c));
        }
    }
    let pos = |id: &BusId| -> Result<usize, EstimError> {
        bus_ids
            .iter()
            .position(|b| b == id)
            .ok_or(EstimError::UnknownBus(*id))
    };
    let c_pos: Vec<usize> = controlled.iter().map(pos).collect::<Result<_, _>>()?;
    let u_pos: Vec<usize> = uncontrolled.iter().map(pos).collect::<Result<_, _>>()?;

    // S = [[Stp, Stq], [Svp, Svq]]; rows m.. are the V rows.
    let sel = |row_set: &[usize], col_set: &[usize], col_block: usize| {
        DMatrix::from_fn(row_set.len(), col_set.len(), |i, j| {
            s_hat[(m + row_set[i], col_block * m + col_set[j])]
        })
    };
    Ok(PartitionedS {
        controlled: controlled.to_vec(),
        uncontrolled: uncontrolled.to_vec(),
        svp_cc: sel(&c_pos, &c_pos, 0),
        svp_cu: sel(&c_pos, &u_pos, 0),
        svp_uc: sel(&u_pos, &c_pos, 0),
        svp_uu: sel(&u_pos, &u_pos, 0),
        svq_cc: sel(&c_pos, &c_pos, 1),
        svq_cu: sel(&c_pos, &u_pos, 1),
        svq_uc: sel(&u_pos, &c_pos, 1),
        svq_uu: sel(&u_pos, &u_pos, 1),
    })
}

/// Drops buses without PMUs from both roles. Pure index selection; the
/// id vectors in the result are the retained index maps.
pub fn reduce_for_missing(
    parts: &PartitionedS,
    available: &[BusId],
) -> Result<PartitionedS, EstimError> {
    let keep_c: Vec<usize> = parts
        .controlled
        .iter()
        .enumerate()
        .filter(|(_, id)| available.contains(id))
        .map(|(i, _)| i)
        .collect();
    let keep_u: Vec<usize> = parts
        .uncontrolled
        .iter()
        .enumerate()
        .filter(|(_, id)| available.contains(id))
        .map(|(i, _)| i)
        .collect();
    if keep_c.is_empty() {
        return Err(EstimError::NoControlledBuses);
    }
    let sel = |mtx: &DMatrix<f64>, rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| mtx[(rows[i], cols[j])])
    };
    Ok(PartitionedS {
        controlled: keep_c.iter().map(|&i| parts.controlled[i]).collect(),
        uncontrolled: keep_u.iter().map(|&i| parts.uncontrolled[i]).collect(),
        svp_cc: sel(&parts.svp_cc, &keep_c, &keep_c),
        svp_cu: sel(&parts.svp_cu, &keep_c, &keep_u),
        svp_uc: sel(&parts.svp_uc, &keep_u, &keep_c),
        svp_uu: sel(&parts.svp_uu, &keep_u, &keep_u),
        svq_cc: sel(&parts.svq_cc, &keep_c, &keep_c),
        svq_cu: sel(&parts.svq_cu, &keep_c, &keep_u),
        svq_uc: sel(&parts.svq_uc, &keep_u, &keep_c),
        svq_uu: sel(&parts.svq_uu, &keep_u, &keep_u),
    })
}

#[cfg(test)]
mod tests;
