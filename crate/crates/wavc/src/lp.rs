//! Boxed infinity-norm minimisation as a dense linear program.
//!
//! `min ||a x + b||_inf` over `x_lo <= x <= x_hi` with optional range
//! constraints `g_lo <= G x <= g_hi`, rewritten in epigraph form
//! (`min t` s.t. `-t <= (a x + b)_i <= t`) and solved by a two-phase
//! tableau simplex. Bland's rule breaks ties, so the iteration cannot
//! cycle; problem sizes here are tiny and pivot count is irrelevant.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

const PIVOT_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("box bounds are inverted at index {0}")]
    InvertedBox(usize),
    #[error("range bounds are inverted at index {0}")]
    InvertedRange(usize),
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone)]
pub struct RangeConstraint {
    pub g: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct LinfProblem {
    /// Residual map, r x d.
    pub a: DMatrix<f64>,
    /// Residual offset, length r.
    pub b: DVector<f64>,
    pub x_lo: DVector<f64>,
    pub x_hi: DVector<f64>,
    pub range: Option<RangeConstraint>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    /// No feasible point; carries the index of a constraint that cannot be
    /// met together with the rest (see `constraint index` docs on
    /// [`LinfSolution::active_set`]).
    Infeasible { separating: usize },
}

/// Solver output. Constraint indices used in `active_set` and in
/// `LpStatus::Infeasible`: `0..r` are residual rows (tight means the row
/// attains the objective), `r..r+d` are box bounds, `r+d..r+d+q` are range
/// rows.
#[derive(Debug, Clone)]
pub struct LinfSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: LpStatus,
    pub active_set: Vec<usize>,
}

pub fn solve_linf(p: &LinfProblem) -> Result<LinfSolution, LpError> {
    let r = p.a.nrows();
    let d = p.a.ncols();
    if p.b.len() != r {
        return Err(LpError::Shape(format!(
            "offset length {} vs {} residual rows",
            p.b.len(),
            r
        )));
    }
    if p.x_lo.len() != d || p.x_hi.len() != d {
        return Err(LpError::Shape("box bound length mismatch".into()));
    }
    for j in 0..d {
        if p.x_lo[j] > p.x_hi[j] {
            return Err(LpError::InvertedBox(j));
        }
    }
    let q = match &p.range {
        Some(rc) => {
            if rc.g.ncols() != d || rc.lo.len() != rc.g.nrows() || rc.hi.len() != rc.g.nrows() {
                return Err(LpError::Shape("range constraint shape mismatch".into()));
            }
            for k in 0..rc.g.nrows() {
                if rc.lo[k] > rc.hi[k] {
                    return Err(LpError::InvertedRange(k));
                }
            }
            rc.g.nrows()
        }
        None => 0,
    };

    // Shift to u = x - x_lo with 0 <= u <= w.
    let w = &p.x_hi - &p.x_lo;
    let beta = &p.b + &p.a * &p.x_lo;
    let (glo, ghi): (DVector<f64>, DVector<f64>) = match &p.range {
        Some(rc) => {
            let base = &rc.g * &p.x_lo;
            (&rc.lo - &base, &rc.hi - &base)
        }
        None => (DVector::zeros(0), DVector::zeros(0)),
    };

    // Row layout: r upper residual, r lower residual, d box, q range-hi,
    // q range-lo. Column layout: d shifted decisions, then t.
    let m = 2 * r + d + 2 * q;
    let nvar = d + 1;
    let mut rows = DMatrix::zeros(m, nvar);
    let mut rhs = DVector::zeros(m);
    for i in 0..r {
        for j in 0..d {
            rows[(i, j)] = p.a[(i, j)];
            rows[(r + i, j)] = -p.a[(i, j)];
        }
        rows[(i, d)] = -1.0;
        rows[(r + i, d)] = -1.0;
        rhs[i] = -beta[i];
        rhs[r + i] = beta[i];
    }
    for j in 0..d {
        rows[(2 * r + j, j)] = 1.0;
        rhs[2 * r + j] = w[j];
    }
    if let Some(rc) = &p.range {
        for k in 0..q {
            for j in 0..d {
                rows[(2 * r + d + k, j)] = rc.g[(k, j)];
                rows[(2 * r + d + q + k, j)] = -rc.g[(k, j)];
            }
            rhs[2 * r + d + k] = ghi[k];
            rhs[2 * r + d + q + k] = -glo[k];
        }
    }

    let mut simplex = Simplex::new(rows, rhs, nvar);
    match simplex.solve(d) {
        SimplexOutcome::Optimal => {}
        SimplexOutcome::Infeasible(row) => {
            return Ok(LinfSolution {
                x: p.x_lo.clone(),
                objective: f64::INFINITY,
                status: LpStatus::Infeasible {
                    separating: lp_row_to_constraint(row, r, d, q),
                },
                active_set: vec![],
            });
        }
    }

    let vals = simplex.variable_values();
    let x = DVector::from_fn(d, |j, _| p.x_lo[j] + vals[j]);
    let objective = if r == 0 {
        0.0
    } else {
        (&p.a * &x + &p.b).amax()
    };

    let residual = &p.a * &x + &p.b;
    let mut active_set = Vec::new();
    for i in 0..r {
        if (residual[i].abs() - objective).abs() <= FEAS_TOL {
            active_set.push(i);
        }
    }
    for j in 0..d {
        if (x[j] - p.x_lo[j]).abs() <= FEAS_TOL || (x[j] - p.x_hi[j]).abs() <= FEAS_TOL {
            active_set.push(r + j);
        }
    }
    if let Some(rc) = &p.range {
        let gx = &rc.g * &x;
        for k in 0..q {
            if (gx[k] - rc.lo[k]).abs() <= FEAS_TOL || (gx[k] - rc.hi[k]).abs() <= FEAS_TOL {
                active_set.push(r + d + k);
            }
        }
    }

    Ok(LinfSolution {
        x,
        objective,
        status: LpStatus::Optimal,
        active_set,
    })
}

fn lp_row_to_constraint(row: usize, r: usize, d: usize, q: usize) -> usize {
    // Fold the internal row layout back onto user-facing constraint indices.
    if row < r {
        row
    } else if row < 2 * r {
        row - r
    } else if row < 2 * r + d {
        r + (row - 2 * r)
    } else if row < 2 * r + d + q {
        r + d + (row - 2 * r - d)
    } else {
        r + d + (row - 2 * r - d - q)
    }
}

enum SimplexOutcome {
    Optimal,
    Infeasible(usize),
}

/// Full-tableau two-phase simplex, minimisation, Bland's rule.
struct Simplex {
    /// Constraint rows with slack and artificial columns appended; the
    /// extra final column is the right-hand side.
    t: DMatrix<f64>,
    obj: DVector<f64>,
    basis: Vec<usize>,
    n_total: usize,
    artificial_start: usize,
}

impl Simplex {
    fn new(rows: DMatrix<f64>, rhs: DVector<f64>, n_structural: usize) -> Self {
        let m = rows.nrows();
        // Flip rows to make every RHS non-negative, then add slacks; a
        // flipped row's slack enters at -1, so it needs an artificial to
        // provide the starting basis.
        let mut need_artificial = Vec::new();
        for i in 0..m {
            if rhs[i] < 0.0 {
                need_artificial.push(i);
            }
        }
        let artificial_start = n_structural + m;
        let n_total = artificial_start + need_artificial.len();
        let mut t = DMatrix::zeros(m, n_total + 1);
        for i in 0..m {
            let sgn = if rhs[i] < 0.0 { -1.0 } else { 1.0 };
            for j in 0..n_structural {
                t[(i, j)] = sgn * rows[(i, j)];
            }
            t[(i, n_structural + i)] = sgn;
            t[(i, n_total)] = sgn * rhs[i];
        }
        for (k, &i) in need_artificial.iter().enumerate() {
            t[(i, artificial_start + k)] = 1.0;
        }
        let mut basis = vec![0usize; m];
        for i in 0..m {
            basis[i] = n_structural + i;
        }
        for (k, &i) in need_artificial.iter().enumerate() {
            basis[i] = artificial_start + k;
        }
        Simplex {
            t,
            obj: DVector::zeros(n_total),
            basis,
            n_total,
            artificial_start,
        }
    }

    /// Runs phase 1 (if artificials exist) and phase 2 minimising the
    /// variable at column `objective_col`.
    fn solve(&mut self, objective_col: usize) -> SimplexOutcome {
        let m = self.t.nrows();
        if self.n_total > self.artificial_start {
            // Phase 1: minimise the sum of artificials.
            let mut cost = DVector::zeros(self.n_total);
            for j in self.artificial_start..self.n_total {
                cost[j] = 1.0;
            }
            self.price_out(&cost);
            self.iterate(self.n_total);
            let infeas: f64 = (0..m)
                .filter(|&i| self.basis[i] >= self.artificial_start)
                .map(|i| self.t[(i, self.n_total)])
                .sum();
            if infeas > FEAS_TOL {
                let row = (0..m)
                    .find(|&i| {
                        self.basis[i] >= self.artificial_start
                            && self.t[(i, self.n_total)] > FEAS_TOL
                    })
                    .unwrap_or(0);
                return SimplexOutcome::Infeasible(row);
            }
            // Pivot leftover zero-level artificials out of the basis.
            for i in 0..m {
                if self.basis[i] >= self.artificial_start {
                    if let Some(j) =
                        (0..self.artificial_start).find(|&j| self.t[(i, j)].abs() > PIVOT_TOL)
                    {
                        self.pivot(i, j);
                    }
                }
            }
        }

        // Phase 2.
        let mut cost = DVector::zeros(self.n_total);
        cost[objective_col] = 1.0;
        self.price_out(&cost);
        self.iterate(self.artificial_start);
        SimplexOutcome::Optimal
    }

    /// Rebuilds the reduced-cost row for the given cost vector.
    fn price_out(&mut self, cost: &DVector<f64>) {
        let m = self.t.nrows();
        let mut obj = cost.clone();
        for i in 0..m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for j in 0..self.n_total {
                    obj[j] -= cb * self.t[(i, j)];
                }
            }
        }
        self.obj = obj;
    }

    /// Bland's rule iteration restricted to columns below `col_limit`.
    /// Columns whose reduced cost is negative but which offer no
    /// admissible pivot are numerically dead (the problem is bounded by
    /// construction) and are passed over.
    fn iterate(&mut self, col_limit: usize) {
        let m = self.t.nrows();
        'outer: loop {
            for enter in 0..col_limit {
                if self.obj[enter] >= -PIVOT_TOL {
                    continue;
                }
                // Leaving: minimum ratio, ties by lowest basic index.
                let mut leave: Option<usize> = None;
                let mut best = f64::INFINITY;
                for i in 0..m {
                    let aij = self.t[(i, enter)];
                    if aij > PIVOT_TOL {
                        let ratio = self.t[(i, self.n_total)] / aij;
                        let better = match leave {
                            None => true,
                            Some(cur) => {
                                ratio < best - PIVOT_TOL
                                    || (ratio < best + PIVOT_TOL
                                        && self.basis[i] < self.basis[cur])
                            }
                        };
                        if better {
                            best = ratio;
                            leave = Some(i);
                        }
                    }
                }
                if let Some(leave) = leave {
                    self.pivot(leave, enter);
                    continue 'outer;
                }
            }
            return;
        }
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let m = self.t.nrows();
        let piv = self.t[(row, col)];
        for j in 0..=self.n_total {
            self.t[(row, j)] /= piv;
        }
        for i in 0..m {
            if i != row {
                let f = self.t[(i, col)];
                if f != 0.0 {
                    for j in 0..=self.n_total {
                        self.t[(i, j)] -= f * self.t[(row, j)];
                    }
                }
            }
        }
        let f = self.obj[col];
        if f != 0.0 {
            let rhs_col = self.n_total;
            for j in 0..rhs_col {
                self.obj[j] -= f * self.t[(row, j)];
            }
        }
        self.basis[row] = col;
    }

    fn variable_values(&self) -> DVector<f64> {
        let mut vals = DVector::zeros(self.n_total);
        for (i, &b) in self.basis.iter().enumerate() {
            vals[b] = self.t[(i, self.n_total)];
        }
        vals
    }
}

/// Checks a point against every constraint of the problem.
pub fn is_feasible(p: &LinfProblem, x: &DVector<f64>, tol: f64) -> bool {
    for j in 0..p.x_lo.len() {
        if x[j] < p.x_lo[j] - tol || x[j] > p.x_hi[j] + tol {
            return false;
        }
    }
    if let Some(rc) = &p.range {
        let gx = &rc.g * x;
        for k in 0..gx.len() {
            if gx[k] < rc.lo[k] - tol || gx[k] > rc.hi[k] + tol {
                return false;
            }
        }
    }
    true
}
