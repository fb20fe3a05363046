//! Desk-scale ERM objectives with stochastic-gradient oracles and the
//! constants the analysis needs (smoothness L, strong convexity mu, a
//! gradient-noise bound sigma^2), plus IID and label-skew data splits.
//!
//! Two families:
//!
//! * quadratic — `f_i(x) = 1/2 (x - c_i)' Q (x - c_i)` with an exact
//!   minimizer at the center mean and `L, mu` read off `Q`'s spectrum. The
//!   stochastic oracle adds isotropic zero-mean noise truncated at three
//!   standard deviations per component, so its variance stays below the
//!   declared `sigma^2`.
//! * multinomial logistic on synthetic class blobs with an l2 term, split
//!   IID or by sort-and-partition. The reference minimizer comes from a
//!   damped Newton run on the centralized problem.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{cholesky_solve, norm_sq, sym_eigenvalues};
use crate::rng::stream_rng;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("curvature matrix must be symmetric positive definite")]
    NotPositiveDefinite,
    #[error("curvature matrix must be symmetric: |Q[{i}][{j}] - Q[{j}][{i}]| = {diff}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("{count} samples cannot be split into {clients} equal shards")]
    UnevenShards { count: usize, clients: usize },
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("client {client} has an empty shard")]
    EmptyShard { client: usize },
    #[error("batch size {batch} outside 1..={shard} for client {client}")]
    BatchOutOfRange {
        batch: usize,
        shard: usize,
        client: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("reference minimizer solve failed: {0}")]
    MinimizerSolve(String),
}

/// Assignment of sample indices to clients. Shards are disjoint,
/// exhaustive and equal-sized; each touches at most `skew` distinct labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub skew: usize,
}

impl Partition {
    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    /// Check disjointness, exhaustiveness, equal sizes, and the label cap.
    pub fn validate(&self, labels: &[usize]) -> Result<(), ObjectiveError> {
        let total = labels.len();
        let mut seen = vec![false; total];
        let shard_len = self.shards.first().map(|s| s.len()).unwrap_or(0);
        for (c, shard) in self.shards.iter().enumerate() {
            if shard.len() != shard_len {
                return Err(ObjectiveError::InfeasibleSplit(format!(
                    "shard {c} has {} samples, expected {shard_len}",
                    shard.len()
                )));
            }
            let mut shard_labels: Vec<usize> = shard
                .iter()
                .map(|&k| {
                    labels.get(k).copied().ok_or(ObjectiveError::Shape(format!(
                        "index {k} out of range"
                    )))
                })
                .collect::<Result<_, _>>()?;
            shard_labels.sort_unstable();
            shard_labels.dedup();
            if shard_labels.len() > self.skew {
                return Err(ObjectiveError::InfeasibleSplit(format!(
                    "shard {c} touches {} labels, cap {}",
                    shard_labels.len(),
                    self.skew
                )));
            }
            for &k in shard {
                if seen[k] {
                    return Err(ObjectiveError::InfeasibleSplit(format!(
                        "index {k} assigned twice"
                    )));
                }
                seen[k] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(ObjectiveError::InfeasibleSplit(
                "some samples unassigned".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("partition serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Label-sorted block dealing: sort samples by label, cut into
/// `clients * skew` equal blocks, deal `skew` random blocks to each client.
/// Every block must be single-label (which holds when each label's count is
/// a multiple of the block size), so any deal respects the skew cap.
pub fn sort_and_partition(
    labels: &[usize],
    clients: usize,
    skew: usize,
    rng: &mut impl Rng,
) -> Result<Partition, ObjectiveError> {
    let total = labels.len();
    if clients == 0 || skew == 0 {
        return Err(ObjectiveError::InfeasibleSplit(
            "clients and skew must be positive".into(),
        ));
    }
    if total == 0 || total % clients != 0 {
        return Err(ObjectiveError::UnevenShards { count: total, clients });
    }
    let blocks = clients * skew;
    if total % blocks != 0 {
        return Err(ObjectiveError::InfeasibleSplit(format!(
            "{total} samples do not divide into {blocks} blocks"
        )));
    }
    let block_size = total / blocks;
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by_key(|&k| (labels[k], k));
    for b in 0..blocks {
        let first = labels[order[b * block_size]];
        let last = labels[order[(b + 1) * block_size - 1]];
        if first != last {
            return Err(ObjectiveError::InfeasibleSplit(format!(
                "block {b} spans labels {first}..{last}; label counts must align with the block size"
            )));
        }
    }
    let mut deal: Vec<usize> = (0..blocks).collect();
    deal.shuffle(rng);
    let shards: Vec<Vec<usize>> = (0..clients)
        .map(|c| {
            let mut shard: Vec<usize> = deal[c * skew..(c + 1) * skew]
                .iter()
                .flat_map(|&b| order[b * block_size..(b + 1) * block_size].iter().copied())
                .collect();
            shard.sort_unstable();
            shard
        })
        .collect();
    Ok(Partition { shards, skew })
}

/// Uniform random split into equal shards. `skew` is set to `label_count`,
/// the trivial cap.
pub fn iid_partition(
    count: usize,
    clients: usize,
    label_count: usize,
    rng: &mut impl Rng,
) -> Result<Partition, ObjectiveError> {
    if clients == 0 || count == 0 || count % clients != 0 {
        return Err(ObjectiveError::UnevenShards { count, clients });
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let per = count / clients;
    let shards: Vec<Vec<usize>> = (0..clients)
        .map(|c| {
            let mut shard = order[c * per..(c + 1) * per].to_vec();
            shard.sort_unstable();
            shard
        })
        .collect();
    Ok(Partition {
        shards,
        skew: label_count,
    })
}

/// How to split synthetic data across clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitKind {
    Iid,
    SortAndPartition { skew: usize },
}

/// Gaussian class blobs: class means sit on a ring of radius 3 in the first
/// two feature coordinates, unit noise everywhere. Labels cycle through the
/// classes, so counts are balanced whenever `total % classes == 0`.
pub fn generate_class_blobs(
    feature_dim: usize,
    classes: usize,
    total: usize,
    rng: &mut impl Rng,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let radius = 3.0;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
            let mut mean = vec![0.0; feature_dim];
            mean[0] = radius * angle.cos();
            if feature_dim > 1 {
                mean[1] = radius * angle.sin();
            }
            mean
        })
        .collect();
    let mut features = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for k in 0..total {
        let y = k % classes;
        let x: Vec<f64> = means[y]
            .iter()
            .map(|&mu| mu + rng.sample::<f64, _>(StandardNormal))
            .collect();
        features.push(x);
        labels.push(y);
    }
    (features, labels)
}

/// Write a dataset as CSV with header `label,x0,...`.
pub fn write_dataset_csv(
    features: &[Vec<f64>],
    labels: &[usize],
    mut w: impl Write,
) -> std::io::Result<()> {
    let dim = features.first().map(|f| f.len()).unwrap_or(0);
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..dim).map(|k| format!("x{k}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (x, &y) in features.iter().zip(labels) {
        let row: Vec<String> = std::iter::once(y.to_string())
            .chain(x.iter().map(|v| format!("{v:.16e}")))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Parse the CSV written by [`write_dataset_csv`].
pub fn read_dataset_csv(r: impl BufRead) -> Result<(Vec<Vec<f64>>, Vec<usize>), ObjectiveError> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line.map_err(|e| ObjectiveError::Shape(format!("io: {e}")))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (idx == 0 && trimmed.starts_with("label")) {
            continue;
        }
        let mut parts = trimmed.split(',');
        let y: usize = parts
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|e| ObjectiveError::Shape(format!("line {}: bad label: {e}", idx + 1)))?;
        let x: Result<Vec<f64>, _> = parts.map(|f| f.trim().parse()).collect();
        let x = x.map_err(|e| ObjectiveError::Shape(format!("line {}: bad value: {e}", idx + 1)))?;
        features.push(x);
        labels.push(y);
    }
    Ok((features, labels))
}

#[derive(Debug, Clone)]
enum Family {
    Quadratic {
        curvature: Vec<Vec<f64>>,
        centers: Vec<Vec<f64>>,
        noise_sigma: f64,
    },
    Logistic {
        classes: usize,
        feature_dim: usize,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        shards: Vec<Vec<usize>>,
        l2: f64,
    },
}

/// An ERM objective: per-client losses with full-gradient and
/// stochastic-gradient oracles, plus the constants of the analysis.
/// Immutable and shareable; every stochastic call takes its own RNG stream.
#[derive(Debug, Clone)]
pub struct ObjectiveSpec {
    dim: usize,
    clients: usize,
    smoothness: f64,
    strong_convexity: f64,
    noise_bound_sq: f64,
    batch: usize,
    minimizer: Option<Vec<f64>>,
    family: Family,
}

impl ObjectiveSpec {
    /// Quadratic family: `f_i(x) = 1/2 (x - c_i)' Q (x - c_i)`. `Q` must be
    /// symmetric positive definite; `L` and `mu` are its extreme
    /// eigenvalues and the exact minimizer is the center mean. The
    /// stochastic oracle returns the exact gradient plus isotropic noise of
    /// total variance at most `noise_sigma^2` (truncated at three standard
    /// deviations per component); batch size is ignored.
    pub fn quadratic(
        curvature: Vec<Vec<f64>>,
        centers: Vec<Vec<f64>>,
        noise_sigma: f64,
    ) -> Result<Self, ObjectiveError> {
        let dim = curvature.len();
        if dim == 0 || curvature.iter().any(|r| r.len() != dim) {
            return Err(ObjectiveError::Shape("curvature must be square".into()));
        }
        for i in 0..dim {
            for j in i + 1..dim {
                let diff = (curvature[i][j] - curvature[j][i]).abs();
                if diff > 1e-12 {
                    return Err(ObjectiveError::NotSymmetric { i, j, diff });
                }
            }
        }
        if centers.is_empty() || centers.iter().any(|c| c.len() != dim) {
            return Err(ObjectiveError::Shape(
                "centers must be nonempty d-vectors".into(),
            ));
        }
        let eigs = sym_eigenvalues(&curvature);
        let mu = eigs[0];
        let smoothness = eigs[eigs.len() - 1];
        if mu <= 0.0 {
            return Err(ObjectiveError::NotPositiveDefinite);
        }
        let clients = centers.len();
        let minimizer: Vec<f64> = (0..dim)
            .map(|k| centers.iter().map(|c| c[k]).sum::<f64>() / clients as f64)
            .collect();
        Ok(Self {
            dim,
            clients,
            smoothness,
            strong_convexity: mu,
            noise_bound_sq: noise_sigma * noise_sigma,
            batch: 1,
            minimizer: Some(minimizer),
            family: Family::Quadratic {
                curvature,
                centers,
                noise_sigma,
            },
        })
    }

    /// Multinomial logistic regression with an l2 term on synthetic class
    /// blobs. The model dimension is `classes * feature_dim`; `mu` is the
    /// l2 coefficient and `L` comes from the per-shard Gram bound
    /// `0.5 * lambda_max(mean a a') + l2`. The reference minimizer is
    /// computed once by damped Newton on the centralized problem.
    pub fn logistic_synthetic(
        feature_dim: usize,
        clients: usize,
        samples_per_client: usize,
        classes: usize,
        split: SplitKind,
        l2: f64,
        data_seed: u64,
    ) -> Result<Self, ObjectiveError> {
        if classes < 2 {
            return Err(ObjectiveError::DegenerateLabels(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if feature_dim == 0 || clients == 0 || samples_per_client == 0 {
            return Err(ObjectiveError::Shape("counts must be positive".into()));
        }
        let total = clients * samples_per_client;
        let mut rng = stream_rng(data_seed, &[0x0b1ec7]);
        let (features, labels) = generate_class_blobs(feature_dim, classes, total, &mut rng);
        let partition = match split {
            SplitKind::Iid => iid_partition(total, clients, classes, &mut rng)?,
            SplitKind::SortAndPartition { skew } => {
                sort_and_partition(&labels, clients, skew, &mut rng)?
            }
        };
        Self::logistic_from_data(features, labels, classes, partition, l2)
    }

    /// Logistic objective over a caller-supplied dataset and partition.
    pub fn logistic_from_data(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        classes: usize,
        partition: Partition,
        l2: f64,
    ) -> Result<Self, ObjectiveError> {
        if classes < 2 {
            return Err(ObjectiveError::DegenerateLabels(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if features.len() != labels.len() || features.is_empty() {
            return Err(ObjectiveError::Shape(
                "features and labels must be nonempty and aligned".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(ObjectiveError::DegenerateLabels(format!(
                "label {bad} out of range 0..{classes}"
            )));
        }
        let feature_dim = features[0].len();
        if features.iter().any(|f| f.len() != feature_dim) {
            return Err(ObjectiveError::Shape("ragged feature rows".into()));
        }
        partition.validate(&labels)?;
        let clients = partition.clients();
        if clients == 0 {
            return Err(ObjectiveError::Shape("no clients".into()));
        }
        let shard_len = partition.shards[0].len();
        if shard_len == 0 {
            return Err(ObjectiveError::EmptyShard { client: 0 });
        }
        if l2 <= 0.0 {
            return Err(ObjectiveError::Shape(format!(
                "l2 coefficient must be positive, got {l2}"
            )));
        }

        // smoothness from the worst shard Gram matrix
        let mut smoothness: f64 = 0.0;
        for shard in &partition.shards {
            let mut gram = vec![vec![0.0; feature_dim]; feature_dim];
            for &k in shard {
                for a in 0..feature_dim {
                    for b in 0..feature_dim {
                        gram[a][b] += features[k][a] * features[k][b] / shard.len() as f64;
                    }
                }
            }
            let top = *sym_eigenvalues(&gram).last().unwrap();
            smoothness = smoothness.max(0.5 * top + l2);
        }

        let dim = classes * feature_dim;
        let mut spec = Self {
            dim,
            clients,
            smoothness,
            strong_convexity: l2,
            noise_bound_sq: 0.0, // filled below from the worst shard scatter
            batch: 64.min(shard_len),
            minimizer: None,
            family: Family::Logistic {
                classes,
                feature_dim,
                features,
                labels,
                shards: partition.shards,
                l2,
            },
        };
        spec.minimizer = Some(spec.newton_minimizer()?);
        spec.noise_bound_sq = spec.logistic_noise_bound();
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    /// Smoothness constant L.
    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    /// Strong-convexity constant mu.
    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    /// Bound on `E||g_i(x) - grad f_i(x)||^2` at the default batch size.
    pub fn noise_bound_sq(&self) -> f64 {
        self.noise_bound_sq
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn set_batch(&mut self, batch: usize) -> Result<(), ObjectiveError> {
        let cap = match &self.family {
            Family::Quadratic { .. } => usize::MAX,
            Family::Logistic { shards, .. } => shards[0].len(),
        };
        if batch == 0 || batch > cap {
            return Err(ObjectiveError::BatchOutOfRange {
                batch,
                shard: cap,
                client: 0,
            });
        }
        self.batch = batch;
        if let Family::Logistic { .. } = self.family {
            self.noise_bound_sq = self.logistic_noise_bound();
        }
        Ok(())
    }

    pub fn minimizer(&self) -> Option<&[f64]> {
        self.minimizer.as_deref()
    }

    /// Sample indices held by `client`, for data-backed families.
    pub fn shard(&self, client: usize) -> Option<&[usize]> {
        match &self.family {
            Family::Quadratic { .. } => None,
            Family::Logistic { shards, .. } => shards.get(client).map(|s| s.as_slice()),
        }
    }

    /// Exact gradient of `f_i` at `x`.
    pub fn full_gradient(&self, client: usize, x: &[f64]) -> Vec<f64> {
        match &self.family {
            Family::Quadratic {
                curvature, centers, ..
            } => {
                let c = &centers[client];
                (0..self.dim)
                    .map(|r| {
                        (0..self.dim)
                            .map(|k| curvature[r][k] * (x[k] - c[k]))
                            .sum()
                    })
                    .collect()
            }
            Family::Logistic { shards, .. } => self.logistic_gradient(&shards[client], x),
        }
    }

    /// Stochastic gradient with an explicit batch size: the mean gradient
    /// over a uniform without-replacement batch from the client's shard
    /// (logistic), or the exact gradient plus truncated isotropic noise
    /// (quadratic, batch ignored). Unbiased for `full_gradient`.
    pub fn stochastic_gradient(
        &self,
        client: usize,
        x: &[f64],
        batch: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>, ObjectiveError> {
        match &self.family {
            Family::Quadratic { noise_sigma, .. } => {
                let mut g = self.full_gradient(client, x);
                if *noise_sigma > 0.0 {
                    let comp_sigma = noise_sigma / (self.dim as f64).sqrt();
                    for v in &mut g {
                        *v += comp_sigma * truncated_standard_normal(rng);
                    }
                }
                Ok(g)
            }
            Family::Logistic { shards, .. } => {
                let shard = shards
                    .get(client)
                    .ok_or(ObjectiveError::Shape(format!("client {client} out of range")))?;
                if shard.is_empty() {
                    return Err(ObjectiveError::EmptyShard { client });
                }
                if batch == 0 || batch > shard.len() {
                    return Err(ObjectiveError::BatchOutOfRange {
                        batch,
                        shard: shard.len(),
                        client,
                    });
                }
                let picks = rand::seq::index::sample(rng, shard.len(), batch);
                let indices: Vec<usize> = picks.iter().map(|k| shard[k]).collect();
                Ok(self.logistic_gradient(&indices, x))
            }
        }
    }

    /// Stochastic gradient at the spec's own batch size.
    pub fn sample_gradient(
        &self,
        client: usize,
        x: &[f64],
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>, ObjectiveError> {
        self.stochastic_gradient(client, x, self.batch, rng)
    }

    /// Loss of client `i` at `x`.
    pub fn client_loss(&self, client: usize, x: &[f64]) -> f64 {
        match &self.family {
            Family::Quadratic {
                curvature, centers, ..
            } => {
                let c = &centers[client];
                let mut total = 0.0;
                for r in 0..self.dim {
                    let mut row = 0.0;
                    for k in 0..self.dim {
                        row += curvature[r][k] * (x[k] - c[k]);
                    }
                    total += (x[r] - c[r]) * row;
                }
                0.5 * total
            }
            Family::Logistic { shards, .. } => self.logistic_loss(&shards[client], x),
        }
    }

    /// Global objective `f(x) = (1/n) sum_i f_i(x)`.
    pub fn loss(&self, x: &[f64]) -> f64 {
        (0..self.clients).map(|i| self.client_loss(i, x)).sum::<f64>() / self.clients as f64
    }

    fn logistic_parts<'a>(&'a self) -> (&'a usize, &'a usize, &'a [Vec<f64>], &'a [usize], f64) {
        match &self.family {
            Family::Logistic {
                classes,
                feature_dim,
                features,
                labels,
                l2,
                ..
            } => (classes, feature_dim, features, labels, *l2),
            Family::Quadratic { .. } => unreachable!("logistic accessor on quadratic family"),
        }
    }

    fn softmax_probs(&self, x: &[f64], sample: usize) -> Vec<f64> {
        let (&classes, &feature_dim, features, _, _) = self.logistic_parts();
        let a = &features[sample];
        let mut scores = vec![0.0; classes];
        for c in 0..classes {
            scores[c] = (0..feature_dim).map(|f| x[c * feature_dim + f] * a[f]).sum();
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
        let z: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= z;
        }
        probs
    }

    fn logistic_loss(&self, indices: &[usize], x: &[f64]) -> f64 {
        let (&classes, &feature_dim, features, labels, l2) = self.logistic_parts();
        let mut total = 0.0;
        for &k in indices {
            let a = &features[k];
            let mut scores = vec![0.0; classes];
            for c in 0..classes {
                scores[c] = (0..feature_dim).map(|f| x[c * feature_dim + f] * a[f]).sum();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + scores.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
            total += lse - scores[labels[k]];
        }
        total / indices.len() as f64 + 0.5 * l2 * norm_sq(x)
    }

    fn logistic_gradient(&self, indices: &[usize], x: &[f64]) -> Vec<f64> {
        let (&classes, &feature_dim, features, labels, l2) = self.logistic_parts();
        let mut g = vec![0.0; self.dim];
        for &k in indices {
            let probs = self.softmax_probs(x, k);
            let a = &features[k];
            for c in 0..classes {
                let coeff = probs[c] - if labels[k] == c { 1.0 } else { 0.0 };
                for f in 0..feature_dim {
                    g[c * feature_dim + f] += coeff * a[f];
                }
            }
        }
        let inv = 1.0 / indices.len() as f64;
        for (gk, &xk) in g.iter_mut().zip(x) {
            *gk = *gk * inv + l2 * xk;
        }
        g
    }

    /// Upper bound on the minibatch gradient variance at the current batch
    /// size, from the worst per-sample scatter around the shard gradient at
    /// the reference minimizer.
    fn logistic_noise_bound(&self) -> f64 {
        let (_, _, _, _, _) = self.logistic_parts();
        let x = self
            .minimizer
            .clone()
            .unwrap_or_else(|| vec![0.0; self.dim]);
        let mut worst: f64 = 0.0;
        for client in 0..self.clients {
            let shard = self.shard(client).unwrap();
            let full = self.logistic_gradient(shard, &x);
            let mut scatter = 0.0;
            for &k in shard {
                let gk = self.logistic_gradient(&[k], &x);
                scatter += gk
                    .iter()
                    .zip(&full)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            worst = worst.max(scatter / (shard.len() as f64 * self.batch as f64));
        }
        worst
    }

    /// Damped Newton on the centralized loss; each step solves the exact
    /// Hessian system (PD thanks to the l2 term).
    fn newton_minimizer(&self) -> Result<Vec<f64>, ObjectiveError> {
        let (&classes, &feature_dim, features, _, l2) = self.logistic_parts();
        let all: Vec<usize> = (0..features.len()).collect();
        let mut x = vec![0.0; self.dim];
        let mut loss = self.logistic_loss(&all, &x);
        for _ in 0..100 {
            let g = self.logistic_gradient(&all, &x);
            let gnorm = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if gnorm <= 1e-12 {
                return Ok(x);
            }
            // Hessian: blocks (c1, c2) of pi_(c1) (delta - pi_(c2)) a a' / m + l2 I
            let mut h = vec![vec![0.0; self.dim]; self.dim];
            let inv_m = 1.0 / features.len() as f64;
            for k in 0..features.len() {
                let probs = self.softmax_probs(&x, k);
                let a = &features[k];
                for c1 in 0..classes {
                    for c2 in 0..classes {
                        let coeff =
                            probs[c1] * (if c1 == c2 { 1.0 } else { 0.0 } - probs[c2]) * inv_m;
                        if coeff == 0.0 {
                            continue;
                        }
                        for f1 in 0..feature_dim {
                            for f2 in 0..feature_dim {
                                h[c1 * feature_dim + f1][c2 * feature_dim + f2] +=
                                    coeff * a[f1] * a[f2];
                            }
                        }
                    }
                }
            }
            for d in 0..self.dim {
                h[d][d] += l2;
            }
            let step = cholesky_solve(&h, &g)
                .ok_or_else(|| ObjectiveError::MinimizerSolve("hessian not PD".into()))?;
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand: Vec<f64> = x.iter().zip(&step).map(|(xi, si)| xi - scale * si).collect();
                let cand_loss = self.logistic_loss(&all, &cand);
                if cand_loss <= loss {
                    x = cand;
                    loss = cand_loss;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                return Ok(x);
            }
        }
        Ok(x)
    }
}

/// Standard normal draw conditioned on |z| <= 3.
fn truncated_standard_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}
