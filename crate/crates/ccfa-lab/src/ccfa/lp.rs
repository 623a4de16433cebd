//! Small dense linear-program solver.
//!
//! Two-phase primal simplex with Bland's rule (lowest-index entering and
//! leaving variables), which is deterministic and cannot cycle. Target
//! selection produces instances of at most a few hundred variables, so a
//! dense tableau is entirely adequate.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

/// `maximize c.x  s.t.  a_i . x (<=|=|>=) b_i,  x >= 0`.
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<(Vec<f64>, Relation, f64)>,
}

pub struct LpSolution {
    pub x: Vec<f64>,
    pub value: f64,
}

const TOL: f64 = 1e-9;

pub fn solve(lp: &LinearProgram) -> Result<LpSolution> {
    let n = lp.objective.len();
    let m = lp.constraints.len();

    // Equality form with slack/surplus variables, rhs made nonnegative.
    // Column layout: [original 0..n | slack/surplus | artificial].
    let mut n_slack = 0;
    for (_, rel, _) in &lp.constraints {
        if *rel != Relation::Eq {
            n_slack += 1;
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut rhs: Vec<f64> = Vec::with_capacity(m);
    let mut slack_col_of_row: Vec<Option<usize>> = vec![None; m];
    let mut slack_idx = 0;
    for (r, (coeffs, rel, b)) in lp.constraints.iter().enumerate() {
        assert_eq!(coeffs.len(), n, "constraint width mismatch");
        let mut row = vec![0.0; n + n_slack];
        row[..n].copy_from_slice(coeffs);
        let mut b = *b;
        let mut rel = *rel;
        if rel != Relation::Eq {
            let col = n + slack_idx;
            row[col] = match rel {
                Relation::Le => 1.0,
                Relation::Ge => -1.0,
                Relation::Eq => unreachable!(),
            };
            slack_col_of_row[r] = Some(col);
            slack_idx += 1;
        }
        if b < 0.0 {
            for v in row.iter_mut() {
                *v = -*v;
            }
            b = -b;
            rel = match rel {
                Relation::Le => Relation::Ge,
                Relation::Ge => Relation::Le,
                Relation::Eq => Relation::Eq,
            };
        }
        // After sign flipping, a row whose slack coefficient is +1 can use
        // the slack as its initial basic variable; everything else needs an
        // artificial.
        let _ = rel;
        rows.push(row);
        rhs.push(b);
    }

    // Add artificial variables where no ready-made basic column exists.
    let mut basis: Vec<usize> = vec![usize::MAX; m];
    let mut artificial_cols: Vec<usize> = Vec::new();
    let mut total_cols = n + n_slack;
    for r in 0..m {
        if let Some(col) = slack_col_of_row[r] {
            if rows[r][col] > 0.5 {
                basis[r] = col;
                continue;
            }
        }
        let col = total_cols;
        total_cols += 1;
        for (rr, row) in rows.iter_mut().enumerate() {
            row.push(if rr == r { 1.0 } else { 0.0 });
        }
        basis[r] = col;
        artificial_cols.push(col);
    }

    // Phase 1: minimize the sum of artificials.
    if !artificial_cols.is_empty() {
        let mut cost = vec![0.0; total_cols];
        for &c in &artificial_cols {
            cost[c] = 1.0;
        }
        let value = run_simplex(&mut rows, &mut rhs, &mut basis, &cost)?;
        if value > 1e-7 {
            return Err(Error::Infeasible("phase-1 optimum positive"));
        }
        // Pivot any remaining artificial out of the basis.
        for r in 0..m {
            if artificial_cols.contains(&basis[r]) {
                let pivot_col = (0..n + n_slack).find(|&j| rows[r][j].abs() > TOL);
                if let Some(j) = pivot_col {
                    pivot(&mut rows, &mut rhs, &mut basis, r, j);
                }
                // A fully zero row is a redundant constraint; the artificial
                // stays basic at level zero and never re-enters because its
                // phase-2 cost column is zero and it is excluded below.
            }
        }
    }

    // Phase 2: minimize -objective over the original and slack columns.
    let mut cost = vec![0.0; total_cols];
    for j in 0..n {
        cost[j] = -lp.objective[j];
    }
    // Forbid artificials from re-entering.
    for &c in &artificial_cols {
        cost[c] = 1e30;
    }
    run_simplex(&mut rows, &mut rhs, &mut basis, &cost)?;

    let mut x = vec![0.0; n];
    for r in 0..m {
        if basis[r] < n {
            x[basis[r]] = rhs[r];
        }
    }
    let value = lp
        .objective
        .iter()
        .zip(&x)
        .map(|(c, v)| c * v)
        .sum::<f64>();
    Ok(LpSolution { x, value })
}

/// Minimize `cost . x` over the current tableau. Returns the optimal cost.
fn run_simplex(
    rows: &mut [Vec<f64>],
    rhs: &mut [f64],
    basis: &mut [usize],
    cost: &[f64],
) -> Result<f64> {
    let m = rows.len();
    let total_cols = cost.len();

    // Reduced-cost row, canonicalized against the current basis.
    let mut red = cost.to_vec();
    let mut obj = 0.0;
    for r in 0..m {
        let cb = cost[basis[r]];
        if cb != 0.0 {
            for j in 0..total_cols {
                red[j] -= cb * rows[r][j];
            }
            obj -= cb * rhs[r];
        }
    }

    loop {
        // Bland: lowest-index improving column.
        let entering = (0..total_cols).find(|&j| red[j] < -TOL);
        let Some(j) = entering else {
            return Ok(-obj);
        };
        // Ratio test; ties resolved toward the smallest basic variable index.
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..m {
            if rows[r][j] > TOL {
                let ratio = rhs[r] / rows[r][j];
                leave = match leave {
                    None => Some((r, ratio)),
                    Some((br, bratio)) => {
                        if ratio < bratio - TOL
                            || (ratio < bratio + TOL && basis[r] < basis[br])
                        {
                            Some((r, ratio))
                        } else {
                            Some((br, bratio))
                        }
                    }
                };
            }
        }
        let Some((r, _)) = leave else {
            return Err(Error::Infeasible("unbounded"));
        };
        let delta = pivot_with_red(rows, rhs, basis, &mut red, r, j);
        obj += delta;
    }
}

fn pivot(rows: &mut [Vec<f64>], rhs: &mut [f64], basis: &mut [usize], r: usize, j: usize) {
    let piv = rows[r][j];
    for v in rows[r].iter_mut() {
        *v /= piv;
    }
    rhs[r] /= piv;
    for rr in 0..rows.len() {
        if rr != r {
            let factor = rows[rr][j];
            if factor != 0.0 {
                for c in 0..rows[rr].len() {
                    rows[rr][c] -= factor * rows[r][c];
                }
                rhs[rr] -= factor * rhs[r];
            }
        }
    }
    basis[r] = j;
}

/// Pivot and keep the reduced-cost row in sync; returns the objective delta.
fn pivot_with_red(
    rows: &mut [Vec<f64>],
    rhs: &mut [f64],
    basis: &mut [usize],
    red: &mut [f64],
    r: usize,
    j: usize,
) -> f64 {
    pivot(rows, rhs, basis, r, j);
    let factor = red[j];
    let mut delta = 0.0;
    if factor != 0.0 {
        for c in 0..red.len() {
            red[c] -= factor * rows[r][c];
        }
        delta = -factor * rhs[r];
    }
    delta
}
