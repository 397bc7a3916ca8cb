//! Client dataset synthesis.
//!
//! Two heterogeneity sources compose here: feature shift, produced by
//! re-sampling each class's Gaussian with probability proportional to a second
//! Gaussian density, and label skew from a per-class Dirichlet allocation.

pub mod idx;
pub mod scenario;

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::numcore::{sample_gaussian, DiagMat, RngStream};

pub use idx::{load_idx, IdxError, RawDataset};
pub use scenario::{DataSource, FeatureShift, IdxSource, SyntheticScenario};

/// Fraction of each client's samples used for training.
pub const TRAIN_FRACTION: f64 = 0.8;

const MIN_POOL: usize = 10_000;
const POOL_FACTOR: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("every re-sampling weight underflowed; the weight center is too far from the points")]
    DegenerateWeights,
    #[error("client {0} would receive an empty dataset")]
    EmptyDataset(usize),
    #[error("no partition without empty clients after {0} attempts")]
    PartitionInfeasible(usize),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("invalid partition config: {0}")]
    InvalidPartition(String),
    #[error(transparent)]
    Idx(#[from] IdxError),
}

/// Per-class Gaussians of the raw input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<DiagMat>,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let k = self.means.len();
        if k < 2 {
            return Err(DataError::InvalidMixture(format!(
                "need at least 2 classes, got {k}"
            )));
        }
        if self.covs.len() != k || self.weights.len() != k {
            return Err(DataError::InvalidMixture(
                "means, covs and weights must have one entry per class".into(),
            ));
        }
        let d = self.dim();
        if d == 0 {
            return Err(DataError::InvalidMixture("zero input dimension".into()));
        }
        for c in 0..k {
            if self.means[c].len() != d || self.covs[c].dim() != d {
                return Err(DataError::InvalidMixture(format!(
                    "class {c} has inconsistent dimension"
                )));
            }
            if self.means[c].iter().any(|v| !v.is_finite()) {
                return Err(DataError::InvalidMixture(format!(
                    "class {c} mean is not finite"
                )));
            }
            let w = self.weights[c];
            if !(w > 0.0 && w <= 1.0) {
                return Err(DataError::InvalidMixture(format!(
                    "class {c} weight {w} outside (0, 1]"
                )));
            }
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidMixture(format!("weights sum to {total}")));
        }
        Ok(())
    }
}

/// Gaussian re-sampling weight `N(center, cov)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleWeight {
    pub center: Vec<f64>,
    pub cov: DiagMat,
}

/// Label skew configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub alpha: f64,
    pub num_clients: usize,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

fn default_retries() -> usize {
    1000
}

impl PartitionConfig {
    pub fn new(alpha: f64, num_clients: usize) -> Self {
        Self {
            alpha,
            num_clients,
            max_retries: default_retries(),
        }
    }
}

/// Samples of one client with a disjoint 80/20 train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub num_classes: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientDataset {
    /// Splits the given samples into train/test with `|train| = round(0.8 n)`.
    pub fn with_split(
        client_id: usize,
        num_classes: usize,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        rng: &mut RngStream,
    ) -> Result<Self, DataError> {
        if let Some(&class) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::ClassOutOfRange { class, num_classes });
        }
        let n = labels.len();
        if n == 0 {
            return Err(DataError::EmptyDataset(client_id));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
        let test = order.split_off(n_train);
        Ok(Self {
            client_id,
            num_classes,
            features,
            labels,
            train: order,
            test,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn n_test(&self) -> usize {
        self.test.len()
    }

    pub fn train_features(&self) -> Vec<&[f64]> {
        self.train
            .iter()
            .map(|&i| self.features[i].as_slice())
            .collect()
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn test_features(&self) -> Vec<&[f64]> {
        self.test
            .iter()
            .map(|&i| self.features[i].as_slice())
            .collect()
    }

    pub fn test_labels(&self) -> Vec<usize> {
        self.test.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Closed-form limit of weighted re-sampling: `S* = (S⁻¹ + Ω⁻¹)⁻¹`,
/// `μ* = S* (S⁻¹ μ + Ω⁻¹ ν)`.
pub fn analytic_resample_params(
    mean: &[f64],
    cov: &DiagMat,
    center: &[f64],
    weight_cov: &DiagMat,
) -> (Vec<f64>, DiagMat) {
    let mut mu = Vec::with_capacity(mean.len());
    let mut s = Vec::with_capacity(mean.len());
    for j in 0..mean.len() {
        let p_src = 1.0 / cov.diag()[j];
        let p_w = 1.0 / weight_cov.diag()[j];
        let prec = p_src + p_w;
        s.push(1.0 / prec);
        mu.push((p_src * mean[j] + p_w * center[j]) / prec);
    }
    (mu, DiagMat::projected(s))
}

/// Log of the unnormalized Gaussian weight density (constants dropped; they
/// cancel in the normalization).
fn log_weight(x: &[f64], w: &ResampleWeight) -> f64 {
    -0.5 * x
        .iter()
        .zip(w.center.iter().zip(w.cov.diag()))
        .map(|(xi, (c, v))| (xi - c) * (xi - c) / v)
        .sum::<f64>()
}

/// Draws `n_out` points with replacement, each selected with probability
/// proportional to `N(point; w.center, w.cov)` normalized over `points`.
pub fn weighted_resample<P: AsRef<[f64]>>(
    points: &[P],
    w: &ResampleWeight,
    n_out: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>, DataError> {
    if points.is_empty() {
        return Err(DataError::EmptyDataset(0));
    }
    let logw: Vec<f64> = points.iter().map(|p| log_weight(p.as_ref(), w)).collect();
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(DataError::DegenerateWeights);
    }
    let weights: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|_| DataError::DegenerateWeights)?;
    Ok((0..n_out)
        .map(|_| points[dist.sample(rng)].as_ref().to_vec())
        .collect())
}

/// Source-pool size used when re-sampling `n_out` points.
pub fn source_pool_size(n_out: usize) -> usize {
    (POOL_FACTOR * n_out).max(MIN_POOL)
}

/// Builds one client's dataset. Classes without an entry in `weights` are
/// drawn directly from their mixture component.
pub fn generate_client_dataset(
    spec: &MixtureSpec,
    weights: &BTreeMap<usize, ResampleWeight>,
    class_counts: &BTreeMap<usize, usize>,
    client_id: usize,
    rng: &mut RngStream,
) -> Result<ClientDataset, DataError> {
    let k = spec.num_classes();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (&class, &count) in class_counts {
        if class >= k {
            return Err(DataError::ClassOutOfRange {
                class,
                num_classes: k,
            });
        }
        if count == 0 {
            continue;
        }
        let (mean, cov) = (&spec.means[class], &spec.covs[class]);
        let drawn = match weights.get(&class) {
            Some(w) => {
                let pool: Vec<Vec<f64>> = (0..source_pool_size(count))
                    .map(|_| sample_gaussian(mean, cov, rng))
                    .collect();
                weighted_resample(&pool, w, count, rng)?
            }
            None => (0..count)
                .map(|_| sample_gaussian(mean, cov, rng))
                .collect(),
        };
        features.extend(drawn);
        labels.extend(std::iter::repeat_n(class, count));
    }
    if labels.is_empty() {
        return Err(DataError::EmptyDataset(client_id));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    let features = order
        .iter()
        .map(|&i| std::mem::take(&mut features[i]))
        .collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    ClientDataset::with_split(client_id, k, features, labels, rng)
}

/// One draw from a symmetric Dirichlet(alpha) over `m` components.
pub fn sample_symmetric_dirichlet(alpha: f64, m: usize, rng: &mut RngStream) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let g: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        if s > 0.0 && s.is_finite() {
            return g.into_iter().map(|v| v / s).collect();
        }
    }
}

/// Allocates each class's indices across clients by a Dirichlet(alpha) draw.
/// The whole allocation is redrawn while any client would end up empty.
pub fn dirichlet_partition(
    labels: &[usize],
    cfg: &PartitionConfig,
    rng: &mut RngStream,
) -> Result<Vec<Vec<usize>>, DataError> {
    if !(cfg.alpha > 0.0) || !cfg.alpha.is_finite() {
        return Err(DataError::InvalidPartition(format!(
            "alpha must be > 0, got {}",
            cfg.alpha
        )));
    }
    if cfg.num_clients == 0 {
        return Err(DataError::InvalidPartition(
            "need at least one client".into(),
        ));
    }
    if labels.is_empty() {
        return Err(DataError::EmptyDataset(0));
    }
    if labels.len() < cfg.num_clients {
        return Err(DataError::PartitionInfeasible(0));
    }
    let m = cfg.num_clients;
    let num_classes = labels.iter().max().map_or(0, |v| v + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    for _ in 0..cfg.max_retries.max(1) {
        let mut clients: Vec<Vec<usize>> = vec![Vec::new(); m];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut idx = members.clone();
            idx.shuffle(rng);
            let p = sample_symmetric_dirichlet(cfg.alpha, m, rng);
            let n = idx.len() as f64;
            let mut start = 0usize;
            let mut cum = 0.0;
            for (c, pc) in p.iter().enumerate() {
                cum += pc;
                let end = if c + 1 == m {
                    idx.len()
                } else {
                    ((cum * n) as usize).min(idx.len())
                };
                let end = end.max(start);
                clients[c].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if clients.iter().all(|c| !c.is_empty()) {
            return Ok(clients);
        }
    }
    Err(DataError::PartitionInfeasible(cfg.max_retries))
}
