//! Least-squares and total-least-squares Jacobian identification from
//! paired sample differences, the baselines the lag-covariance route is
//! compared against.

use super::EstimError;
use crate::sim::PmuWindow;
use nalgebra::DMatrix;

/// Builds the difference samples `x = [d theta; d v]`, `y = [d p; d q]`
/// between consecutive window rows, one column per increment.
pub fn lsq_samples_from_window(window: &PmuWindow) -> Result<(DMatrix<f64>, DMatrix<f64>), EstimError> {
    let (Some(p_ch), Some(q_ch)) = (&window.p, &window.q) else {
        return Err(EstimError::MissingPowerChannels);
    };
    let n = window.n_samples();
    if n < 2 {
        return Err(EstimError::InsufficientData { needed: 2, got: n });
    }
    let m = window.n_buses();
    let cols = n - 1;
    let mut x = DMatrix::zeros(2 * m, cols);
    let mut y = DMatrix::zeros(2 * m, cols);
    for i in 1..n {
        for k in 0..m {
            x[(k, i - 1)] = window.theta[(i, k)] - window.theta[(i - 1, k)];
            x[(m + k, i - 1)] = window.v[(i, k)] - window.v[(i - 1, k)];
            y[(k, i - 1)] = p_ch[(i, k)] - p_ch[(i - 1, k)];
            y[(m + k, i - 1)] = q_ch[(i, k)] - q_ch[(i - 1, k)];
        }
    }
    Ok((x, y))
}

fn numerical_rank(gram: &DMatrix<f64>) -> usize {
    let ev = gram.clone().symmetric_eigen().eigenvalues;
    let max = ev.iter().copied().fold(0.0f64, |a, b| a.max(b.abs()));
    if max == 0.0 {
        return 0;
    }
    ev.iter().filter(|&&e| e.abs() > max * 1e-12).count()
}

/// Ordinary least squares for `y ~ J x` over the sample columns:
/// `J = Y X^T (X X^T)^-1`.
pub fn estimate_ls(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>, EstimError> {
    let dim = x.nrows();
    assert_eq!(y.nrows(), dim);
    assert_eq!(y.ncols(), x.ncols());
    let gram = x * x.transpose();
    let rank = numerical_rank(&gram);
    if rank < dim {
        return Err(EstimError::RankDeficient { rank, needed: dim });
    }
    let rhs = x * y.transpose();
    let solved = gram
        .lu()
        .solve(&rhs)
        .ok_or(EstimError::RankDeficient { rank, needed: dim })?;
    Ok(solved.transpose())
}

/// Total least squares via the smallest singular subspace of the stacked
/// data `[x; y]`: with `V = [[v11, v12], [v21, v22]]` the eigenvectors of
/// the stacked Gram matrix ordered by decreasing eigenvalue, the solution
/// is `J = (-v12 v22^-1)^T`.
pub fn estimate_tls(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>, EstimError> {
    let dim = x.nrows();
    assert_eq!(y.nrows(), dim);
    assert_eq!(y.ncols(), x.ncols());
    let n = x.ncols();
    if n < 2 * dim {
        return Err(EstimError::RankDeficient {
            rank: n,
            needed: 2 * dim,
        });
    }
    // Identifiability needs full-rank regressors; the stacked data itself
    // is rank dim for exact samples, which is fine.
    let x_rank = numerical_rank(&(x * x.transpose()));
    if x_rank < dim {
        return Err(EstimError::RankDeficient {
            rank: x_rank,
            needed: dim,
        });
    }
    let mut z = DMatrix::zeros(2 * dim, n);
    z.view_mut((0, 0), (dim, n)).copy_from(x);
    z.view_mut((dim, 0), (dim, n)).copy_from(y);
    let gram = &z * z.transpose();
    let eig = gram.symmetric_eigen();
    // Order eigenpairs by decreasing eigenvalue.
    let mut order: Vec<usize> = (0..2 * dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut v12 = DMatrix::zeros(dim, dim);
    let mut v22 = DMatrix::zeros(dim, dim);
    for (col, &src) in order.iter().skip(dim).enumerate() {
        for row in 0..dim {
            v12[(row, col)] = eig.eigenvectors[(row, src)];
            v22[(row, col)] = eig.eigenvectors[(dim + row, src)];
        }
    }
    let v22_inv = v22
        .lu()
        .try_inverse()
        .ok_or(EstimError::RankDeficient {
            rank: dim - 1,
            needed: dim,
        })?;
    Ok((-(v12 * v22_inv)).transpose())
}
