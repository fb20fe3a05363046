//! Checkable consequences of the analysis: the closed-form covariance of
//! the effective weights, an exhaustive enumeration oracle for it, and the
//! convergence-bound constants.
//!
//! The effective weight of client `i` in a round is
//! `W_i = sum_j tau_j tau_ij a_ji` — the total coefficient its update
//! carries at the PS. Under the unbiasedness constraint `E[W_i] = 1`, and
//!
//! ```text
//! E[(W_i - 1)^2]        = sum_j p_j p_ij (1 - p_j p_ij) a_ji^2
//! E[(W_i - 1)(W_l - 1)] = sum_j p_j (1-p_j) p_ij p_lj a_ji a_jl
//!                       + p_i p_l (E_il - p_il p_li) a_il a_li     (i != l)
//! ```
//!
//! whose grand sum is exactly the variance functional `S`. The enumeration
//! oracle computes the same expectations by walking every joint realization
//! (pairs via their 2x2 joint tables, uplinks via Bernoulli branches), so it
//! shares no algebra with the closed form.

use serde::{Deserialize, Serialize};

use crate::connectivity::ConnectivityModel;
use crate::weights::{max_unbiasedness_residual, s_value, WeightMatrix, CONSTRAINT_TOL};

/// Enumeration walks `2^n * 4^(n(n-1)/2)` states; past five clients that is
/// no longer a unit-test-sized job.
pub const ENUM_MAX_CLIENTS: usize = 5;

/// Constants of the expected-distance-to-optimality bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    /// Variance functional `S(p, P, A)`.
    pub s: f64,
    /// `B = 2 L^2 S / n^2`.
    pub b: f64,
    /// First round index from which the bound holds:
    /// `max{L/mu, 4(B/mu^2 + 1), 1/T, 4n/(mu^2 T)}`.
    pub r0: f64,
    /// `C1 = (16/mu^2) * (2 sigma^2 / n^2) * S`.
    pub c1: f64,
    /// `C2 = (16/mu^2) * L^2 * (sigma^2/n) * e`.
    pub c2: f64,
    /// `C3 = (256/mu^4) * (L^2 sigma^2 e + 2 L^2 sigma^2 e S / n^2)`.
    pub c3: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum TheoryError {
    #[error("weight matrix violates unbiasedness: max residual {0:e} (the covariance formulas assume the constraint)")]
    ConstraintViolated(f64),
    #[error("enumeration supports at most {max} clients, got {n}", max = ENUM_MAX_CLIENTS)]
    TooManyClients { n: usize },
    #[error("strong convexity mu must be positive, got {0}")]
    NonPositiveMu(f64),
    #[error("bound holds only for r >= r0 = {r0}, got r = {r}")]
    RoundBelowThreshold { r: f64, r0: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

fn check_shapes(m: &ConnectivityModel, w: &WeightMatrix) -> Result<(), TheoryError> {
    if w.n() != m.n || w.rows.iter().any(|r| r.len() != m.n) {
        return Err(TheoryError::Shape(format!(
            "model has n = {}, weight matrix is {}x{:?}",
            m.n,
            w.n(),
            w.rows.first().map(|r| r.len())
        )));
    }
    Ok(())
}

/// Closed-form covariance matrix of the effective weights,
/// `cov[i][l] = E[(W_i - 1)(W_l - 1)]`. Requires the unbiasedness
/// constraint to hold within [`CONSTRAINT_TOL`]. The sum of all entries
/// equals [`s_value`].
pub fn closed_form_covariance(
    m: &ConnectivityModel,
    w: &WeightMatrix,
) -> Result<Vec<Vec<f64>>, TheoryError> {
    check_shapes(m, w)?;
    let residual = max_unbiasedness_residual(m, w);
    if residual > CONSTRAINT_TOL {
        return Err(TheoryError::ConstraintViolated(residual));
    }
    let n = m.n;
    let mut cov = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let q = m.p[j] * m.link[i][j];
            cov[i][i] += q * (1.0 - q) * w.rows[j][i] * w.rows[j][i];
        }
        for l in 0..n {
            if l == i {
                continue;
            }
            let mut v = 0.0;
            for j in 0..n {
                v += m.p[j]
                    * (1.0 - m.p[j])
                    * m.link[i][j]
                    * m.link[l][j]
                    * w.rows[j][i]
                    * w.rows[j][l];
            }
            v += m.p[i]
                * m.p[l]
                * (m.recip[i][l] - m.link[i][l] * m.link[l][i])
                * w.rows[i][l]
                * w.rows[l][i];
            cov[i][l] = v;
        }
    }
    Ok(cov)
}

/// Exact covariance by exhaustive enumeration of the joint realization
/// space: one 4-outcome table per unordered pair, one Bernoulli branch per
/// uplink. Independent oracle for [`closed_form_covariance`]; does not
/// itself require the unbiasedness constraint.
pub fn enumerate_covariance(
    m: &ConnectivityModel,
    w: &WeightMatrix,
) -> Result<Vec<Vec<f64>>, TheoryError> {
    check_shapes(m, w)?;
    let n = m.n;
    if n > ENUM_MAX_CLIENTS {
        return Err(TheoryError::TooManyClients { n });
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let cells: Vec<[f64; 4]> = pairs
        .iter()
        .map(|&(i, j)| {
            let pij = m.link[i][j];
            let pji = m.link[j][i];
            let e = m.recip[i][j];
            [e, pij - e, pji - e, 1.0 - pij - pji + e]
        })
        .collect();

    let mut cov = vec![vec![0.0; n]; n];
    let mut tau = vec![vec![false; n]; n];
    for i in 0..n {
        tau[i][i] = true;
    }
    let mut state = vec![0usize; pairs.len()];
    loop {
        let mut prob_pairs = 1.0;
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let s = state[k];
            prob_pairs *= cells[k][s];
            tau[i][j] = s == 0 || s == 1;
            tau[j][i] = s == 0 || s == 2;
        }
        if prob_pairs > 0.0 {
            for up_mask in 0..(1usize << n) {
                let mut prob = prob_pairs;
                for b in 0..n {
                    let pb = m.p[b];
                    prob *= if up_mask >> b & 1 == 1 { pb } else { 1.0 - pb };
                }
                if prob == 0.0 {
                    continue;
                }
                // W_i = sum over j with uplink of tau_ij * a_ji
                let wts: Vec<f64> = (0..n)
                    .map(|i| {
                        (0..n)
                            .filter(|&j| up_mask >> j & 1 == 1 && tau[i][j])
                            .map(|j| w.rows[j][i])
                            .sum::<f64>()
                    })
                    .collect();
                for i in 0..n {
                    for l in 0..n {
                        cov[i][l] += prob * ((wts[i] - 1.0) * (wts[l] - 1.0));
                    }
                }
            }
        }
        // mixed-radix increment over the pair outcomes
        let mut k = 0;
        loop {
            if k == state.len() {
                return Ok(cov);
            }
            state[k] += 1;
            if state[k] < 4 {
                break;
            }
            state[k] = 0;
            k += 1;
        }
    }
}

/// Constants of the bound for a given model, weight matrix, objective
/// constants and local-step count.
pub fn compute_constants(
    m: &ConnectivityModel,
    w: &WeightMatrix,
    smoothness: f64,
    mu: f64,
    sigma_sq: f64,
    local_steps: usize,
) -> Result<TheoryConstants, TheoryError> {
    if mu <= 0.0 {
        return Err(TheoryError::NonPositiveMu(mu));
    }
    check_shapes(m, w)?;
    let n = m.n as f64;
    let t = local_steps as f64;
    let e = std::f64::consts::E;
    let l2 = smoothness * smoothness;
    let s = s_value(m, w);
    let b = 2.0 * l2 * s / (n * n);
    let r0 = (smoothness / mu)
        .max(4.0 * (b / (mu * mu) + 1.0))
        .max(1.0 / t)
        .max(4.0 * n / (mu * mu * t));
    let c1 = 16.0 / (mu * mu) * (2.0 * sigma_sq / (n * n)) * s;
    let c2 = 16.0 / (mu * mu) * l2 * (sigma_sq / n) * e;
    let c3 = 256.0 / (mu * mu * mu * mu) * (l2 * sigma_sq * e + 2.0 * l2 * sigma_sq * e * s / (n * n));
    Ok(TheoryConstants {
        s,
        b,
        r0,
        c1,
        c2,
        c3,
    })
}

/// Evaluate the bound on `E||x^(r+1) - x*||^2` at round `r >= r0`:
///
/// ```text
/// (r0 T + 1)/(r T + 1)^2 * D0 + C1 T/(rT+1) + C2 (T-1)^2/(rT+1) + C3 (T-1)/(rT+1)^2
/// ```
pub fn theorem_bound(
    consts: &TheoryConstants,
    dist0_sq: f64,
    local_steps: usize,
    r: f64,
) -> Result<f64, TheoryError> {
    if r < consts.r0 {
        return Err(TheoryError::RoundBelowThreshold { r, r0: consts.r0 });
    }
    let t = local_steps as f64;
    let rt1 = r * t + 1.0;
    Ok((consts.r0 * t + 1.0) / (rt1 * rt1) * dist0_sq
        + consts.c1 * t / rt1
        + consts.c2 * (t - 1.0) * (t - 1.0) / rt1
        + consts.c3 * (t - 1.0) / (rt1 * rt1))
}

/// Bound-versus-empirical rows as CSV: `r,bound,empirical_mean,empirical_stderr`.
pub fn write_bound_csv(
    rows: &[(usize, f64, f64, f64)],
    mut w: impl std::io::Write,
) -> std::io::Result<()> {
    writeln!(w, "r,bound,empirical_mean,empirical_stderr")?;
    for &(r, bound, mean, stderr) in rows {
        writeln!(w, "{r},{bound:.16e},{mean:.16e},{stderr:.16e}")?;
    }
    Ok(())
}
