//! Relay-weight optimization.
//!
//! The relay matrix `A` (entry `a[i][j]` is the weight client `i` applies to
//! client `j`'s update) is chosen to minimize the variance functional
//!
//! ```text
//! S = sum_{i,j,l} p_j(1-p_j) p_ij p_lj a_ji a_jl
//!   + sum_{i,j}   p_ij p_j (1-p_ij) a_ji^2
//!   + sum_{i,l}   p_i p_l (E_il - p_il p_li) a_il a_li
//! ```
//!
//! subject to nonnegativity and, per column `i`, the unbiasedness constraint
//! `sum_j p_j p_ij a_ji = 1`. The last sum of `S` makes the problem
//! nonconvex, so the solver works in two phases: Gauss-Seidel on the convex
//! surrogate `S_bar` (same expression with `a_li^2` in place of
//! `a_il a_li`), then Gauss-Seidel on `S` itself warm-started from the
//! surrogate's optimum. Each column subproblem has a closed-form KKT
//! solution parameterized by a multiplier found with bisection.
//!
//! The surrogate phase needs `E_ij >= p_ij p_ji` (nonnegative reciprocity
//! excess) to keep its denominators positive; models below the independence
//! product are rejected up front.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::{ConnectivityModel, ModelIssue};

/// Acceptable per-column unbiasedness residual.
pub const CONSTRAINT_TOL: f64 = 1e-9;
/// Bisection stops once `|g(lambda) - 1|` falls below this.
pub const BISECT_TOL: f64 = 1e-12;
/// Hard cap on bisection iterations.
pub const BISECT_MAX_ITERS: usize = 200;
/// A phase ends early once a full sweep moves no entry by more than this.
pub const SWEEP_STOP_TOL: f64 = 1e-10;

/// Relay coefficients; `rows[i][j]` is the weight client `i` applies to the
/// update it received from client `j`. Column `i` (entries `rows[j][i]`)
/// collects everything relayed on behalf of client `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl WeightMatrix {
    pub fn identity(n: usize) -> Self {
        let mut rows = vec![vec![0.0; n]; n];
        for (i, row) in rows.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { rows }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|row| row[i]).collect()
    }

    pub fn set_column(&mut self, i: usize, col: &[f64]) {
        for (row, &v) in self.rows.iter_mut().zip(col) {
            row[i] = v;
        }
    }

    /// Random matrix satisfying the unbiasedness constraint of `m`: draw
    /// nonnegative entries on the feasible support, then rescale each
    /// column onto its constraint. Test/bench helper.
    pub fn random_feasible(m: &ConnectivityModel, rng: &mut impl Rng) -> Self {
        let n = m.n;
        let mut rows = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut raw = vec![0.0; n];
            let mut mass = 0.0;
            for j in 0..n {
                let q = m.p[j] * m.link[i][j];
                if q > 0.0 {
                    raw[j] = rng.random_range(0.25..1.0);
                    mass += q * raw[j];
                }
            }
            for j in 0..n {
                rows[j][i] = raw[j] / mass;
            }
        }
        Self { rows }
    }

    /// Write as CSV, one row per client, 17 significant digits.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Parse the CSV written by [`write_csv`](Self::write_csv).
    pub fn read_csv(r: impl BufRead) -> Result<Self, WeightsError> {
        let mut rows = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| WeightsError::Shape(format!("io: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse()).collect();
            rows.push(row.map_err(|e| WeightsError::Shape(format!("bad entry: {e}")))?);
        }
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(WeightsError::Shape("matrix is not square".into()));
        }
        Ok(Self { rows })
    }
}

/// What the optimizer did: sweep counts, final objective values, the worst
/// constraint residual seen after any column update, and the objective
/// value after every column update of each phase (the leading entry of each
/// trace is the value before the phase starts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub relaxed_sweeps: usize,
    pub finetune_sweeps: usize,
    pub s_bar_final: f64,
    pub s_final: f64,
    pub max_residual: f64,
    pub relaxed_trace: Vec<f64>,
    pub finetune_trace: Vec<f64>,
}

impl SolverReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WeightsError {
    #[error("invalid connectivity model: {}", format_issues(.0))]
    InvalidModel(Vec<ModelIssue>),
    #[error("no relay path can serve clients {0:?}: every p_j * p_ij in those columns is zero")]
    InfeasibleColumns(Vec<usize>),
    #[error("E[{i}][{j}] = {e} is below P[{i}][{j}] * P[{j}][{i}] = {prod}; the surrogate phase requires nonnegative reciprocity excess")]
    RecipBelowProduct { i: usize, j: usize, e: f64, prod: f64 },
    #[error("bisection bracket failure at {end}: g({at}) = {value}, target 1")]
    BadBracket {
        end: &'static str,
        at: f64,
        value: f64,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

fn format_issues(issues: &[ModelIssue]) -> String {
    issues
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Column `i` is unsatisfiable when every product `p_j * p_ij` vanishes:
/// nobody who can reach the PS ever hears from client `i`. Returns the
/// offending columns.
pub fn feasibility_check(m: &ConnectivityModel) -> Result<(), Vec<usize>> {
    let bad: Vec<usize> = (0..m.n)
        .filter(|&i| (0..m.n).all(|j| m.p[j] * m.link[i][j] == 0.0))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(bad)
    }
}

/// Everything `optimize_weights` requires of a model: valid, feasible, and
/// `E_ij >= p_ij p_ji` on every pair.
pub fn check_optimizable(m: &ConnectivityModel) -> Result<(), WeightsError> {
    m.validate().map_err(WeightsError::InvalidModel)?;
    for i in 0..m.n {
        for j in i + 1..m.n {
            let prod = m.link[i][j] * m.link[j][i];
            if m.recip[i][j] < prod - 1e-12 {
                return Err(WeightsError::RecipBelowProduct {
                    i,
                    j,
                    e: m.recip[i][j],
                    prod,
                });
            }
        }
    }
    feasibility_check(m).map_err(WeightsError::InfeasibleColumns)
}

/// Feasible starting point: spread each column's unit of constraint mass
/// uniformly over its usable relays, `a_ji = 1 / (count_i * p_j * p_ij)`.
/// Satisfies the unbiasedness constraint by construction.
pub fn init_weights(m: &ConnectivityModel) -> Result<WeightMatrix, WeightsError> {
    feasibility_check(m).map_err(WeightsError::InfeasibleColumns)?;
    let n = m.n;
    let mut rows = vec![vec![0.0; n]; n];
    for i in 0..n {
        let count = (0..n)
            .filter(|&k| m.p[k] > 0.0 && m.link[i][k] > 0.0)
            .count() as f64;
        for j in 0..n {
            if m.p[j] > 0.0 && m.link[i][j] > 0.0 {
                rows[j][i] = 1.0 / (count * m.p[j] * m.link[i][j]);
            }
        }
    }
    Ok(WeightMatrix { rows })
}

/// Per-column constraint residuals: entry `i` is
/// `p_i a_ii + sum_{j != i} p_j p_ij a_ji - 1`.
pub fn unbiasedness_residuals(m: &ConnectivityModel, w: &WeightMatrix) -> Vec<f64> {
    (0..m.n)
        .map(|i| {
            (0..m.n)
                .map(|j| m.p[j] * m.link[i][j] * w.rows[j][i])
                .sum::<f64>()
                - 1.0
        })
        .collect()
}

/// Largest absolute constraint residual over all columns.
pub fn max_unbiasedness_residual(m: &ConnectivityModel, w: &WeightMatrix) -> f64 {
    unbiasedness_residuals(m, w)
        .into_iter()
        .fold(0.0, |acc, r| acc.max(r.abs()))
}

/// The variance functional `S(p, P, A)` driving the convergence bound.
pub fn s_value(m: &ConnectivityModel, w: &WeightMatrix) -> f64 {
    let n = m.n;
    let mut total = 0.0;
    for j in 0..n {
        let pj = m.p[j];
        if pj == 0.0 {
            continue;
        }
        for i in 0..n {
            for l in 0..n {
                total += pj * (1.0 - pj) * m.link[i][j] * m.link[l][j] * w.rows[j][i]
                    * w.rows[j][l];
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            let a = w.rows[j][i];
            total += m.link[i][j] * m.p[j] * (1.0 - m.link[i][j]) * a * a;
        }
    }
    for i in 0..n {
        for l in 0..n {
            total += m.p[i]
                * m.p[l]
                * (m.recip[i][l] - m.link[i][l] * m.link[l][i])
                * w.rows[i][l]
                * w.rows[l][i];
        }
    }
    total
}

/// Convex surrogate `S_bar`: identical to [`s_value`] except the
/// reciprocity sum uses `a_li^2` instead of `a_il a_li`. Upper-bounds `S`
/// on nonnegative matrices.
pub fn s_bar_value(m: &ConnectivityModel, w: &WeightMatrix) -> f64 {
    let n = m.n;
    let mut total = 0.0;
    for j in 0..n {
        let pj = m.p[j];
        if pj == 0.0 {
            continue;
        }
        for i in 0..n {
            for l in 0..n {
                total += pj * (1.0 - pj) * m.link[i][j] * m.link[l][j] * w.rows[j][i]
                    * w.rows[j][l];
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            let a = w.rows[j][i];
            total += m.link[i][j] * m.p[j] * (1.0 - m.link[i][j]) * a * a;
        }
    }
    for i in 0..n {
        for l in 0..n {
            let a = w.rows[l][i];
            total += m.p[i] * m.p[l] * (m.recip[i][l] - m.link[i][l] * m.link[l][i]) * a * a;
        }
    }
    total
}

/// Find `lambda` in `[lo, hi]` with `|g(lambda) - 1| <= tol` for a
/// nondecreasing `g`. Errors if the bracket does not straddle 1; gives up
/// after [`BISECT_MAX_ITERS`] halvings and returns the midpoint.
pub fn bisect_lambda<F: Fn(f64) -> f64>(
    g: F,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<f64, WeightsError> {
    let g_lo = g(lo);
    if (g_lo - 1.0).abs() <= tol {
        return Ok(lo);
    }
    if g_lo > 1.0 {
        return Err(WeightsError::BadBracket {
            end: "lo",
            at: lo,
            value: g_lo,
        });
    }
    let g_hi = g(hi);
    if (g_hi - 1.0).abs() <= tol {
        return Ok(hi);
    }
    if g_hi < 1.0 {
        return Err(WeightsError::BadBracket {
            end: "hi",
            at: hi,
            value: g_hi,
        });
    }
    let (mut lo, mut hi) = (lo, hi);
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..BISECT_MAX_ITERS {
        mid = 0.5 * (lo + hi);
        let v = g(mid);
        if (v - 1.0).abs() <= tol {
            return Ok(mid);
        }
        if v < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Relaxed,
    Finetune,
}

/// Closed-form KKT solve of one column subproblem. Both phases share the
/// case structure: entries with `p_j p_ij = 1` split the constraint mass
/// evenly and everything else is zeroed; entries with `p_j p_ij = 0` are
/// zero; the rest are clamped affine functions of the multiplier, which
/// bisection sets so the column meets its constraint.
fn solve_column(
    m: &ConnectivityModel,
    w: &WeightMatrix,
    i: usize,
    phase: Phase,
) -> Result<Vec<f64>, WeightsError> {
    let n = m.n;
    let q: Vec<f64> = (0..n).map(|j| m.p[j] * m.link[i][j]).collect();
    let mut col = vec![0.0; n];

    let det_count = q.iter().filter(|&&v| v == 1.0).count();
    if det_count > 0 {
        let share = 1.0 / det_count as f64;
        for j in 0..n {
            if q[j] == 1.0 {
                col[j] = share;
            }
        }
        return Ok(col);
    }
    if q.iter().all(|&v| v == 0.0) {
        return Err(WeightsError::InfeasibleColumns(vec![i]));
    }

    let mut num_base = vec![0.0; n];
    let mut denom = vec![0.0; n];
    let mut hi = 0.0f64;
    for j in 0..n {
        if q[j] == 0.0 {
            continue;
        }
        let cross: f64 = (0..n)
            .filter(|&l| l != i)
            .map(|l| m.link[l][j] * w.rows[j][l])
            .sum();
        // E_ij / p_ij - p_ji, nonnegative once check_optimizable passed
        let excess = m.recip[i][j] / m.link[i][j] - m.link[j][i];
        let (nb, dn) = match phase {
            Phase::Relaxed => (
                -2.0 * (1.0 - m.p[j]) * cross,
                2.0 * ((1.0 - q[j]) + m.p[i] * excess),
            ),
            Phase::Finetune => (
                -2.0 * (1.0 - m.p[j]) * cross - 2.0 * m.p[i] * excess * w.rows[i][j],
                2.0 * (1.0 - q[j]),
            ),
        };
        num_base[j] = nb;
        denom[j] = dn;
        hi = hi.max(dn / q[j] - nb);
    }

    let entry = |j: usize, lam: f64| ((num_base[j] + lam) / denom[j]).max(0.0);
    let g = |lam: f64| -> f64 {
        (0..n)
            .map(|j| if q[j] > 0.0 { q[j] * entry(j, lam) } else { 0.0 })
            .sum()
    };
    let lam = bisect_lambda(g, 0.0, hi, BISECT_TOL)?;
    for j in 0..n {
        if q[j] > 0.0 {
            col[j] = entry(j, lam);
        }
    }
    Ok(col)
}

/// One exact minimization of the surrogate objective over column `i`,
/// all other columns held fixed.
pub fn solve_column_relaxed(
    m: &ConnectivityModel,
    w: &WeightMatrix,
    i: usize,
) -> Result<Vec<f64>, WeightsError> {
    solve_column(m, w, i, Phase::Relaxed)
}

/// One exact minimization of `S` over column `i`, all other columns held
/// fixed. On models with every `p_ij` in {0, 1} this coincides with
/// [`solve_column_relaxed`] bit for bit: the reciprocity excess vanishes.
pub fn solve_column_finetune(
    m: &ConnectivityModel,
    w: &WeightMatrix,
    i: usize,
) -> Result<Vec<f64>, WeightsError> {
    solve_column(m, w, i, Phase::Finetune)
}

/// Two-phase Gauss-Seidel: `sweeps` full passes over the columns against
/// the surrogate, then `sweeps` more against `S` warm-started from the
/// surrogate optimum. A phase stops early when a full sweep moves no entry
/// by more than [`SWEEP_STOP_TOL`]. Deterministic in its inputs.
pub fn optimize_weights(
    m: &ConnectivityModel,
    sweeps: usize,
) -> Result<(WeightMatrix, SolverReport), WeightsError> {
    check_optimizable(m)?;
    let mut w = init_weights(m)?;
    let n = m.n;
    let mut max_residual = 0.0f64;
    let mut residual_of = |w: &WeightMatrix, i: usize| {
        let r = ((0..n)
            .map(|j| m.p[j] * m.link[i][j] * w.rows[j][i])
            .sum::<f64>()
            - 1.0)
            .abs();
        max_residual = max_residual.max(r);
    };

    let mut relaxed_trace = vec![s_bar_value(m, &w)];
    let mut relaxed_sweeps = 0;
    for _ in 0..sweeps {
        let mut max_change = 0.0f64;
        for i in 0..n {
            let col = solve_column(m, &w, i, Phase::Relaxed)?;
            for j in 0..n {
                max_change = max_change.max((col[j] - w.rows[j][i]).abs());
            }
            w.set_column(i, &col);
            residual_of(&w, i);
            relaxed_trace.push(s_bar_value(m, &w));
        }
        relaxed_sweeps += 1;
        if max_change < SWEEP_STOP_TOL {
            break;
        }
    }

    let mut finetune_trace = vec![s_value(m, &w)];
    let mut finetune_sweeps = 0;
    for _ in 0..sweeps {
        let mut max_change = 0.0f64;
        for i in 0..n {
            let col = solve_column(m, &w, i, Phase::Finetune)?;
            for j in 0..n {
                max_change = max_change.max((col[j] - w.rows[j][i]).abs());
            }
            w.set_column(i, &col);
            residual_of(&w, i);
            finetune_trace.push(s_value(m, &w));
        }
        finetune_sweeps += 1;
        if max_change < SWEEP_STOP_TOL {
            break;
        }
    }

    let report = SolverReport {
        relaxed_sweeps,
        finetune_sweeps,
        s_bar_final: s_bar_value(m, &w),
        s_final: s_value(m, &w),
        max_residual,
        relaxed_trace,
        finetune_trace,
    };
    Ok((w, report))
}
