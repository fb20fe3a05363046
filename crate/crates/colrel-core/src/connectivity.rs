//! Intermittent-connectivity models and their per-round realizations.
//!
//! A [`ConnectivityModel`] holds the uplink success probabilities `p`, the
//! client-to-client success probabilities `P` (`P[i][j]` is the probability
//! that a transmission from `i` reaches `j`), and the reciprocity
//! cross-moments `E[i][j] = E[tau_ij * tau_ji]`. For each unordered pair the
//! two directions are sampled from the unique joint law with those marginals
//! and cross-moment:
//!
//! ```text
//! Pr(1,1) = E_ij     Pr(1,0) = p_ij - E_ij
//! Pr(0,1) = p_ji - E_ij     Pr(0,0) = 1 - p_ij - p_ji + E_ij
//! ```
//!
//! All four cells are nonnegative exactly when `E_ij` lies within the
//! Frechet bounds, which is what [`ConnectivityModel::validate`] enforces.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Length scale of the mmWave blockage model, in meters.
pub const MMWAVE_DECAY_M: f64 = 30.0;
/// Exponent offset of the mmWave blockage model.
pub const MMWAVE_OFFSET: f64 = 5.2;
/// Link probability defining the permanent-link distance threshold.
pub const THRESHOLD_LINK_PROB: f64 = 0.99;

/// mmWave link success probability at distance `d` meters:
/// `min(1, exp(-d/30 + 5.2))`.
pub fn mmwave_prob(d: f64) -> f64 {
    (-d / MMWAVE_DECAY_M + MMWAVE_OFFSET).exp().min(1.0)
}

/// Distance at which the mmWave link probability drops to 0.99, i.e.
/// `30 * (5.2 - ln 0.99)` meters. Links at or below this distance count as
/// permanent in the threshold topology.
pub fn threshold_distance_m() -> f64 {
    MMWAVE_DECAY_M * (MMWAVE_OFFSET - THRESHOLD_LINK_PROB.ln())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// A violated model invariant. `validate` returns every violation it finds.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelIssue {
    #[error("{name} = {value} outside [0, 1]")]
    ParameterOutOfRange { name: String, value: f64 },
    #[error("p[{i}] = {value} outside [0, 1]")]
    UplinkOutOfRange { i: usize, value: f64 },
    #[error("P[{i}][{j}] = {value} outside [0, 1]")]
    LinkOutOfRange { i: usize, j: usize, value: f64 },
    #[error("p_ii must be 1: P[{i}][{i}] = {value}")]
    SelfLinkNotOne { i: usize, value: f64 },
    #[error("E must be symmetric: E[{i}][{j}] = {a} but E[{j}][{i}] = {b}")]
    RecipNotSymmetric { i: usize, j: usize, a: f64, b: f64 },
    #[error("E[{i}][{i}] must be 1, got {value}")]
    SelfRecipNotOne { i: usize, value: f64 },
    #[error("E[{i}][{j}] = {value} exceeds min(P[{i}][{j}], P[{j}][{i}]) = {bound}")]
    RecipAboveFrechet {
        i: usize,
        j: usize,
        value: f64,
        bound: f64,
    },
    #[error("E[{i}][{j}] = {value} below max(0, P[{i}][{j}] + P[{j}][{i}] - 1) = {bound}")]
    RecipBelowFrechet {
        i: usize,
        j: usize,
        value: f64,
        bound: f64,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

const VALIDATE_EPS: f64 = 1e-12;

/// Uplink and inter-client success probabilities plus reciprocity
/// cross-moments. Immutable after construction; share freely across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectivityModel {
    /// Client count.
    pub n: usize,
    /// Uplink success probabilities `p_i`.
    pub p: Vec<f64>,
    /// Inter-client success probabilities; `P[i][j]` is the probability the
    /// transmission i -> j succeeds. Diagonal fixed at 1.
    #[serde(rename = "P")]
    pub link: Vec<Vec<f64>>,
    /// Reciprocity cross-moments `E[tau_ij * tau_ji]`. Symmetric, diagonal 1.
    #[serde(rename = "E")]
    pub recip: Vec<Vec<f64>>,
}

/// One round's sampled link indicators. `up[i]` is the uplink of client `i`,
/// `link[i][j]` the success of the i -> j transmission; `link[i][i]` is
/// always true.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkRealization {
    pub up: Vec<bool>,
    pub link: Vec<Vec<bool>>,
}

impl LinkRealization {
    /// Number of clients whose uplink succeeded.
    pub fn uplink_count(&self) -> usize {
        self.up.iter().filter(|&&b| b).count()
    }
}

impl ConnectivityModel {
    /// Erdos-Renyi collaboration: every inter-client link succeeds with
    /// probability `p_c`. With `reciprocal` the two directions of a pair
    /// fail together (`E_ij = p_c`); otherwise they are independent
    /// (`E_ij = p_c^2`).
    pub fn erdos_renyi(p_up: &[f64], p_c: f64, reciprocal: bool) -> Result<Self, ModelIssue> {
        if !(0.0..=1.0).contains(&p_c) {
            return Err(ModelIssue::ParameterOutOfRange {
                name: "p_c".into(),
                value: p_c,
            });
        }
        for (i, &v) in p_up.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(ModelIssue::UplinkOutOfRange { i, value: v });
            }
        }
        let n = p_up.len();
        let mut link = vec![vec![p_c; n]; n];
        let e_off = if reciprocal { p_c } else { p_c * p_c };
        let mut recip = vec![vec![e_off; n]; n];
        for i in 0..n {
            link[i][i] = 1.0;
            recip[i][i] = 1.0;
        }
        Ok(Self {
            n,
            p: p_up.to_vec(),
            link,
            recip,
        })
    }

    /// Erdos-Renyi graph drawn once and then frozen: each unordered pair
    /// gets a permanent link with probability `p_c`, so every `p_ij` is 0
    /// or 1 and `E = P .* P^T`.
    pub fn erdos_renyi_frozen(
        p_up: &[f64],
        p_c: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelIssue> {
        let mut model = Self::erdos_renyi(p_up, p_c, true)?;
        let n = model.n;
        for i in 0..n {
            for j in i + 1..n {
                let present = rng.random::<f64>() < p_c;
                let v = if present { 1.0 } else { 0.0 };
                model.link[i][j] = v;
                model.link[j][i] = v;
                model.recip[i][j] = v;
                model.recip[j][i] = v;
            }
        }
        Ok(model)
    }

    /// mmWave topology from client and PS positions (meters). Inter-client
    /// links with success probability below `prune_below` are removed
    /// entirely. Distances are symmetric, so `p_ij = p_ji`; blockage is
    /// assumed to hit both directions at once, hence `E_ij = p_ij`.
    pub fn mmwave(
        clients: &[[f64; 2]],
        ps: [f64; 2],
        prune_below: f64,
    ) -> Result<Self, ModelIssue> {
        if !(0.0..=1.0).contains(&prune_below) {
            return Err(ModelIssue::ParameterOutOfRange {
                name: "prune_below".into(),
                value: prune_below,
            });
        }
        if clients.iter().any(|c| !c[0].is_finite() || !c[1].is_finite())
            || !ps[0].is_finite()
            || !ps[1].is_finite()
        {
            return Err(ModelIssue::Shape("positions must be finite".into()));
        }
        let n = clients.len();
        let p: Vec<f64> = clients.iter().map(|&c| mmwave_prob(dist(c, ps))).collect();
        let mut link = vec![vec![1.0; n]; n];
        let mut recip = vec![vec![1.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let mut pij = mmwave_prob(dist(clients[i], clients[j]));
                if pij < prune_below {
                    pij = 0.0;
                }
                link[i][j] = pij;
                link[j][i] = pij;
                recip[i][j] = pij;
                recip[j][i] = pij;
            }
        }
        Ok(Self { n, p, link, recip })
    }

    /// Threshold topology: permanent links wherever the mmWave probability
    /// would be at least 0.99 (distance at most [`threshold_distance_m`]),
    /// nothing elsewhere. Links are deterministic, so `E = P .* P^T`.
    pub fn threshold(clients: &[[f64; 2]], ps: [f64; 2]) -> Result<Self, ModelIssue> {
        let d_th = threshold_distance_m();
        let step = |d: f64| if d <= d_th { 1.0 } else { 0.0 };
        if clients.iter().any(|c| !c[0].is_finite() || !c[1].is_finite())
            || !ps[0].is_finite()
            || !ps[1].is_finite()
        {
            return Err(ModelIssue::Shape("positions must be finite".into()));
        }
        let n = clients.len();
        let p: Vec<f64> = clients.iter().map(|&c| step(dist(c, ps))).collect();
        let mut link = vec![vec![1.0; n]; n];
        let mut recip = vec![vec![1.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let pij = step(dist(clients[i], clients[j]));
                link[i][j] = pij;
                link[j][i] = pij;
                recip[i][j] = pij * pij;
                recip[j][i] = pij * pij;
            }
        }
        Ok(Self { n, p, link, recip })
    }

    /// Random fully-specified model for tests and benchmarks: probabilities
    /// in [0.1, 0.95], a fifth of the pairs disconnected, and `E` drawn
    /// between the independence product and the Frechet upper bound so the
    /// optimizer's `E_ij >= p_ij p_ji` requirement always holds.
    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.95)).collect();
        let mut link = vec![vec![1.0; n]; n];
        let mut recip = vec![vec![1.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < 0.2 {
                    link[i][j] = 0.0;
                    link[j][i] = 0.0;
                    recip[i][j] = 0.0;
                    recip[j][i] = 0.0;
                    continue;
                }
                let pij: f64 = rng.random_range(0.1..0.95);
                let pji: f64 = rng.random_range(0.1..0.95);
                let lo = pij * pji;
                let hi = pij.min(pji);
                let e = lo + rng.random::<f64>() * (hi - lo);
                link[i][j] = pij;
                link[j][i] = pji;
                recip[i][j] = e;
                recip[j][i] = e;
            }
        }
        Self { n, p, link, recip }
    }

    /// Check every model invariant and return all violations.
    pub fn validate(&self) -> Result<(), Vec<ModelIssue>> {
        let mut issues = Vec::new();
        let n = self.n;
        if self.p.len() != n || self.link.len() != n || self.recip.len() != n {
            issues.push(ModelIssue::Shape(format!(
                "expected n = {n} rows, got p: {}, P: {}, E: {}",
                self.p.len(),
                self.link.len(),
                self.recip.len()
            )));
            return Err(issues);
        }
        if let Some(row) = self
            .link
            .iter()
            .chain(self.recip.iter())
            .find(|r| r.len() != n)
        {
            issues.push(ModelIssue::Shape(format!(
                "ragged matrix row of length {} (n = {n})",
                row.len()
            )));
            return Err(issues);
        }
        for (i, &v) in self.p.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                issues.push(ModelIssue::UplinkOutOfRange { i, value: v });
            }
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.link[i][j];
                if !(0.0..=1.0).contains(&v) {
                    issues.push(ModelIssue::LinkOutOfRange { i, j, value: v });
                }
            }
            if (self.link[i][i] - 1.0).abs() > VALIDATE_EPS {
                issues.push(ModelIssue::SelfLinkNotOne {
                    i,
                    value: self.link[i][i],
                });
            }
            if (self.recip[i][i] - 1.0).abs() > VALIDATE_EPS {
                issues.push(ModelIssue::SelfRecipNotOne {
                    i,
                    value: self.recip[i][i],
                });
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let e = self.recip[i][j];
                if (e - self.recip[j][i]).abs() > VALIDATE_EPS {
                    issues.push(ModelIssue::RecipNotSymmetric {
                        i,
                        j,
                        a: e,
                        b: self.recip[j][i],
                    });
                }
                let pij = self.link[i][j];
                let pji = self.link[j][i];
                let upper = pij.min(pji);
                let lower = (pij + pji - 1.0).max(0.0);
                if e > upper + VALIDATE_EPS {
                    issues.push(ModelIssue::RecipAboveFrechet {
                        i,
                        j,
                        value: e,
                        bound: upper,
                    });
                }
                if e < lower - VALIDATE_EPS {
                    issues.push(ModelIssue::RecipBelowFrechet {
                        i,
                        j,
                        value: e,
                        bound: lower,
                    });
                }
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }

    /// Sample one round. Uplinks are independent Bernoulli(p_i); each
    /// unordered pair is drawn from its 2x2 joint table. Requires a model
    /// that passed [`validate`](Self::validate), otherwise a joint cell may
    /// be negative.
    pub fn sample(&self, rng: &mut impl Rng) -> LinkRealization {
        let n = self.n;
        let up: Vec<bool> = (0..n).map(|i| rng.random::<f64>() < self.p[i]).collect();
        let mut link = vec![vec![false; n]; n];
        for i in 0..n {
            link[i][i] = true;
        }
        for i in 0..n {
            for j in i + 1..n {
                let pij = self.link[i][j];
                let pji = self.link[j][i];
                let e = self.recip[i][j];
                debug_assert!(pij - e >= -VALIDATE_EPS && pji - e >= -VALIDATE_EPS);
                let u: f64 = rng.random();
                // cumulative cells: (1,1), (1,0), (0,1), (0,0)
                let (tij, tji) = if u < e {
                    (true, true)
                } else if u < pij {
                    (true, false)
                } else if u < pij + pji - e {
                    (false, true)
                } else {
                    (false, false)
                };
                link[i][j] = tij;
                link[j][i] = tji;
            }
        }
        LinkRealization { up, link }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Errors from reading position or model files.
#[derive(Debug, thiserror::Error)]
pub enum PositionsError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("empty positions file")]
    Empty,
}

/// Read client positions from CSV with header `id,x,y`. Rows are returned
/// in ascending id order.
pub fn read_positions_csv(path: &Path) -> Result<Vec<[f64; 2]>, PositionsError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    parse_positions(reader)
}

/// Parse `id,x,y` rows from any reader; see [`read_positions_csv`].
pub fn parse_positions(reader: impl BufRead) -> Result<Vec<[f64; 2]>, PositionsError> {
    let mut rows: Vec<(u64, [f64; 2])> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 && trimmed.eq_ignore_ascii_case("id,x,y") {
            continue;
        }
        let parts: Vec<&str> = trimmed.split(',').collect();
        if parts.len() != 3 {
            return Err(PositionsError::Parse {
                line: idx + 1,
                reason: format!("expected 3 fields, got {}", parts.len()),
            });
        }
        let id: u64 = parts[0].trim().parse().map_err(|e| PositionsError::Parse {
            line: idx + 1,
            reason: format!("bad id: {e}"),
        })?;
        let x: f64 = parts[1].trim().parse().map_err(|e| PositionsError::Parse {
            line: idx + 1,
            reason: format!("bad x: {e}"),
        })?;
        let y: f64 = parts[2].trim().parse().map_err(|e| PositionsError::Parse {
            line: idx + 1,
            reason: format!("bad y: {e}"),
        })?;
        if rows.iter().any(|&(other, _)| other == id) {
            return Err(PositionsError::DuplicateId(id));
        }
        rows.push((id, [x, y]));
    }
    if rows.is_empty() {
        return Err(PositionsError::Empty);
    }
    rows.sort_by_key(|&(id, _)| id);
    Ok(rows.into_iter().map(|(_, pos)| pos).collect())
}

/// Write positions in the same `id,x,y` format accepted by
/// [`read_positions_csv`].
pub fn write_positions_csv(
    positions: &[[f64; 2]],
    mut w: impl Write,
) -> std::io::Result<()> {
    writeln!(w, "id,x,y")?;
    for (id, pos) in positions.iter().enumerate() {
        writeln!(w, "{id},{:.16e},{:.16e}", pos[0], pos[1])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;

    fn two_client_model(p12: f64, p21: f64, e: f64, p: [f64; 2]) -> ConnectivityModel {
        ConnectivityModel {
            n: 2,
            p: p.to_vec(),
            link: vec![vec![1.0, p12], vec![p21, 1.0]],
            recip: vec![vec![1.0, e], vec![e, 1.0]],
        }
    }

    #[test]
    fn perfect_network_validates() {
        let m = two_client_model(1.0, 1.0, 1.0, [1.0, 1.0]);
        assert!(m.validate().is_ok());
    }

    #[test]
    fn recip_above_frechet_rejected() {
        let m = two_client_model(0.5, 0.5, 0.6, [1.0, 1.0]);
        let issues = m.validate().unwrap_err();
        assert!(issues
            .iter()
            .any(|e| matches!(e, ModelIssue::RecipAboveFrechet { .. })));
    }

    #[test]
    fn self_link_must_be_one() {
        let mut m = two_client_model(0.5, 0.5, 0.25, [0.9, 1.0]);
        m.link[0][0] = 0.9;
        let issues = m.validate().unwrap_err();
        assert!(issues
            .iter()
            .any(|e| matches!(e, ModelIssue::SelfLinkNotOne { i: 0, .. })));
    }

    #[test]
    fn validation_collects_all_issues() {
        let mut m = two_client_model(0.5, 0.5, 0.6, [1.5, 1.0]);
        m.recip[1][0] = 0.55;
        let issues = m.validate().unwrap_err();
        assert!(issues.len() >= 3);
    }

    #[test]
    fn erdos_renyi_reciprocal() {
        let m = ConnectivityModel::erdos_renyi(&[0.1, 0.1, 0.9], 0.9, true).unwrap();
        assert!(m.validate().is_ok());
        assert_eq!(m.link[0][1], 0.9);
        assert_eq!(m.recip[0][1], 0.9);
        assert_eq!(m.link[1][1], 1.0);
    }

    #[test]
    fn erdos_renyi_zero_collaboration_is_isolated() {
        let m = ConnectivityModel::erdos_renyi(&[0.5, 0.5], 0.0, true).unwrap();
        assert_eq!(m.link[0][1], 0.0);
        assert_eq!(m.recip[0][1], 0.0);
        assert_eq!(m.link[0][0], 1.0);
    }

    #[test]
    fn erdos_renyi_independent_directions() {
        let m = ConnectivityModel::erdos_renyi(&[0.5, 0.5], 0.5, false).unwrap();
        assert_eq!(m.recip[0][1], 0.25);
        assert!(m.validate().is_ok());
    }

    #[test]
    fn erdos_renyi_rejects_bad_probability() {
        assert!(ConnectivityModel::erdos_renyi(&[0.5], 1.5, true).is_err());
        assert!(ConnectivityModel::erdos_renyi(&[-0.1], 0.5, true).is_err());
    }

    #[test]
    fn mmwave_formula_values() {
        // d = 156 sits exactly at exp(0) = 1
        assert_eq!(mmwave_prob(156.0), 1.0);
        assert_eq!(mmwave_prob(0.0), 1.0);
        assert_relative_eq!(mmwave_prob(186.0), (-1.0f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn mmwave_prunes_weak_links() {
        // clients 180 m apart: p = exp(-0.8) ~ 0.449 < 0.5, pruned
        let clients = [[0.0, 0.0], [180.0, 0.0]];
        let m = ConnectivityModel::mmwave(&clients, [0.0, 0.0], 0.5).unwrap();
        assert_eq!(m.link[0][1], 0.0);
        assert_eq!(m.recip[0][1], 0.0);
        // without pruning the link survives
        let m = ConnectivityModel::mmwave(&clients, [0.0, 0.0], 0.0).unwrap();
        assert_relative_eq!(m.link[0][1], (-0.8f64).exp(), max_relative = 1e-12);
        assert!(m.validate().is_ok());
    }

    #[test]
    fn threshold_distance_value() {
        assert_relative_eq!(
            threshold_distance_m(),
            156.301510075605,
            epsilon = 1e-9
        );
    }

    #[test]
    fn threshold_links_are_binary() {
        let clients = [[100.0, 0.0], [300.0, 0.0], [160.0, 0.0]];
        let m = ConnectivityModel::threshold(&clients, [0.0, 0.0]).unwrap();
        assert_eq!(m.p[0], 1.0); // d = 100 <= d_th
        assert_eq!(m.p[1], 0.0); // d = 300 > d_th
        assert_eq!(m.link[0][2], 1.0); // d = 60
        assert_eq!(m.link[0][1], 0.0); // d = 200
        assert!(m.validate().is_ok());
        // deterministic links mean E equals the product of the directions
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.recip[i][j], m.link[i][j] * m.link[j][i]);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let m = ConnectivityModel::random(5, &mut stream_rng(11, &[0]));
        let a = m.sample(&mut stream_rng(3, &[7]));
        let b = m.sample(&mut stream_rng(3, &[7]));
        assert_eq!(a, b);
        let c = m.sample(&mut stream_rng(4, &[7]));
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_probabilities_sample_deterministically() {
        let m = two_client_model(1.0, 1.0, 1.0, [0.0, 1.0]);
        let mut rng = stream_rng(0, &[]);
        for _ in 0..200 {
            let r = m.sample(&mut rng);
            assert!(!r.up[0]);
            assert!(r.up[1]);
            assert!(r.link[0][1] && r.link[1][0]);
            assert!(r.link[0][0] && r.link[1][1]);
        }
    }

    #[test]
    fn comonotone_pair_always_agrees() {
        // p_ij = p_ji = 0.5, E = 0.5: Pr(1,0) = Pr(0,1) = 0
        let m = two_client_model(0.5, 0.5, 0.5, [1.0, 1.0]);
        assert!(m.validate().is_ok());
        let mut rng = stream_rng(5, &[]);
        let mut ones = 0usize;
        for _ in 0..10_000 {
            let r = m.sample(&mut rng);
            assert_eq!(r.link[0][1], r.link[1][0]);
            ones += r.link[0][1] as usize;
        }
        // marginal sanity: about half the draws
        assert!((ones as f64 - 5000.0).abs() < 4.0 * (10_000.0f64 * 0.25).sqrt());
    }

    #[test]
    fn empirical_moments_match_model() {
        let m = ConnectivityModel::random(4, &mut stream_rng(21, &[0]));
        let n_samples = 20_000usize;
        let mut rng = stream_rng(9, &[]);
        let mut link_sum = vec![vec![0.0f64; 4]; 4];
        let mut joint_sum = vec![vec![0.0f64; 4]; 4];
        for _ in 0..n_samples {
            let r = m.sample(&mut rng);
            for i in 0..4 {
                for j in 0..4 {
                    link_sum[i][j] += r.link[i][j] as u8 as f64;
                    joint_sum[i][j] += (r.link[i][j] && r.link[j][i]) as u8 as f64;
                }
            }
        }
        let nf = n_samples as f64;
        for i in 0..4 {
            for j in 0..4 {
                let p = m.link[i][j];
                let tol = 4.0 * (p * (1.0 - p) / nf).sqrt();
                assert!(
                    (link_sum[i][j] / nf - p).abs() <= tol,
                    "link ({i},{j}): {} vs {p}",
                    link_sum[i][j] / nf
                );
                let e = m.recip[i][j];
                let tol = 4.0 * (e * (1.0 - e) / nf).sqrt();
                assert!(
                    (joint_sum[i][j] / nf - e).abs() <= tol,
                    "recip ({i},{j}): {} vs {e}",
                    joint_sum[i][j] / nf
                );
            }
        }
    }

    #[test]
    fn json_round_trip_uses_spec_field_names() {
        let m = ConnectivityModel::erdos_renyi(&[0.25, 0.75], 0.5, false).unwrap();
        let json = m.to_json();
        assert!(json.contains("\"P\"") && json.contains("\"E\"") && json.contains("\"p\""));
        let back = ConnectivityModel::from_json(&json).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn positions_csv_round_trip() {
        let pos = [[1.5, -2.0], [0.0, 3.25]];
        let mut buf = Vec::new();
        write_positions_csv(&pos, &mut buf).unwrap();
        let parsed = parse_positions(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(parsed, pos.to_vec());
    }

    #[test]
    fn positions_csv_rejects_garbage() {
        let bad = "id,x,y\n0,1.0\n";
        assert!(parse_positions(std::io::Cursor::new(bad)).is_err());
        let dup = "id,x,y\n0,1.0,2.0\n0,3.0,4.0\n";
        assert!(matches!(
            parse_positions(std::io::Cursor::new(dup)),
            Err(PositionsError::DuplicateId(0))
        ));
    }
}
