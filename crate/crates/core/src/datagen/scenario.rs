//! Scenario files: where the client datasets of an experiment come from.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    dirichlet_partition, generate_client_dataset, load_idx, ClientDataset, DataError, MixtureSpec,
    PartitionConfig, ResampleWeight,
};
use crate::numcore::{sample_gaussian, DiagMat, RngStream};

/// How each client's per-class re-sampling weights are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureShift {
    /// Every client sees the global class Gaussians.
    None,
    /// Centers drawn per client and class from `N(mu_k, tau² I)`, weight
    /// covariance `omega² I`.
    Tau { tau: f64, omega: f64 },
    /// One map class -> weight per client.
    Explicit {
        clients: Vec<BTreeMap<usize, ResampleWeight>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub mixture: MixtureSpec,
    pub num_clients: usize,
    /// Average samples per client; the pooled label set has
    /// `num_clients * samples_per_client` entries before Dirichlet allocation.
    pub samples_per_client: usize,
    pub dirichlet_alpha: f64,
    pub feature_shift: FeatureShift,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub dirichlet_alpha: f64,
    pub num_clients: usize,
    /// Keep a random subset of this many samples (desk-scale runs).
    #[serde(default)]
    pub max_samples: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticScenario),
    Idx(IdxSource),
}

impl DataSource {
    pub fn build(&self) -> Result<Vec<ClientDataset>, DataError> {
        match self {
            DataSource::Synthetic(s) => s.generate(),
            DataSource::Idx(s) => s.build(),
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            DataSource::Synthetic(s) => Some(s.mixture.num_classes()),
            DataSource::Idx(_) => None,
        }
    }
}

/// Default desk-scale parameters.
pub mod desk {
    pub const NUM_CLASSES: usize = 5;
    pub const INPUT_DIM: usize = 16;
    pub const NUM_CLIENTS: usize = 20;
    pub const SAMPLES_PER_CLIENT: usize = 50;
    pub const ALPHA: f64 = 0.3;
    pub const MEAN_SCALE: f64 = 0.4;
    pub const TAU: f64 = 1.0;
    pub const OMEGA: f64 = 2.5;
}

impl SyntheticScenario {
    /// Random isotropic class means `N(0, scale² I)` with unit covariances
    /// and uniform class weights.
    pub fn random_mixture(k: usize, dim: usize, scale: f64, rng: &mut RngStream) -> MixtureSpec {
        let means = (0..k)
            .map(|_| (0..dim).map(|_| scale * rng.standard_normal()).collect())
            .collect();
        MixtureSpec {
            means,
            covs: vec![DiagMat::identity(dim); k],
            weights: vec![1.0 / k as f64; k],
        }
    }

    /// The bundled desk scenario: feature shift plus Dirichlet label skew.
    pub fn desk_default(seed: u64) -> Self {
        let mut rng = RngStream::new(seed).derive(&[0xC1A55]);
        Self {
            mixture: Self::random_mixture(
                desk::NUM_CLASSES,
                desk::INPUT_DIM,
                desk::MEAN_SCALE,
                &mut rng,
            ),
            num_clients: desk::NUM_CLIENTS,
            samples_per_client: desk::SAMPLES_PER_CLIENT,
            dirichlet_alpha: desk::ALPHA,
            feature_shift: FeatureShift::Tau {
                tau: desk::TAU,
                omega: desk::OMEGA,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.mixture.validate()?;
        if self.num_clients == 0 || self.samples_per_client == 0 {
            return Err(DataError::InvalidPartition(
                "need clients and samples".into(),
            ));
        }
        match &self.feature_shift {
            FeatureShift::Tau { tau, omega } if !(*tau >= 0.0 && *omega > 0.0) => {
                Err(DataError::InvalidMixture(format!(
                    "tau must be >= 0 and omega > 0, got {tau}, {omega}"
                )))
            }
            FeatureShift::Explicit { clients } if clients.len() != self.num_clients => {
                Err(DataError::InvalidMixture(format!(
                    "{} explicit weight maps for {} clients",
                    clients.len(),
                    self.num_clients
                )))
            }
            _ => Ok(()),
        }
    }

    /// Per-client, per-class sample counts from a Dirichlet allocation of a
    /// pooled label set whose class proportions follow the mixture weights.
    pub fn class_counts(
        &self,
        rng: &mut RngStream,
    ) -> Result<Vec<BTreeMap<usize, usize>>, DataError> {
        let k = self.mixture.num_classes();
        let total = self.num_clients * self.samples_per_client;
        let mut labels = Vec::with_capacity(total);
        for (c, w) in self.mixture.weights.iter().enumerate() {
            let n = (w * total as f64).round() as usize;
            labels.extend(std::iter::repeat_n(c, n));
        }
        let parts = dirichlet_partition(
            &labels,
            &PartitionConfig::new(self.dirichlet_alpha, self.num_clients),
            rng,
        )?;
        Ok(parts
            .into_iter()
            .map(|idx| {
                let mut counts: BTreeMap<usize, usize> = (0..k).map(|c| (c, 0)).collect();
                for i in idx {
                    *counts.entry(labels[i]).or_default() += 1;
                }
                counts
            })
            .collect())
    }

    fn client_weights(
        &self,
        client: usize,
        rng: &mut RngStream,
    ) -> BTreeMap<usize, ResampleWeight> {
        match &self.feature_shift {
            FeatureShift::None => BTreeMap::new(),
            FeatureShift::Tau { tau, omega } => {
                let d = self.mixture.dim();
                let spread = DiagMat::scaled_identity(d, tau * tau);
                self.mixture
                    .means
                    .iter()
                    .enumerate()
                    .map(|(c, mu)| {
                        let center = if *tau > 0.0 {
                            sample_gaussian(mu, &spread, rng)
                        } else {
                            mu.clone()
                        };
                        (
                            c,
                            ResampleWeight {
                                center,
                                cov: DiagMat::scaled_identity(d, omega * omega),
                            },
                        )
                    })
                    .collect()
            }
            FeatureShift::Explicit { clients } => clients[client].clone(),
        }
    }

    /// Generates every client's dataset. Each client uses its own stream
    /// derived from `(seed, client_id)`, so generation runs in parallel.
    pub fn generate(&self) -> Result<Vec<ClientDataset>, DataError> {
        self.validate()?;
        let root = RngStream::new(self.seed);
        let counts = self.class_counts(&mut root.derive(&[1]))?;
        counts
            .par_iter()
            .enumerate()
            .map(|(client, counts)| {
                let mut wrng = root.derive(&[2, client as u64]);
                let weights = self.client_weights(client, &mut wrng);
                let mut rng = root.derive(&[3, client as u64]);
                generate_client_dataset(&self.mixture, &weights, counts, client, &mut rng)
            })
            .collect()
    }
}

impl IdxSource {
    pub fn build(&self) -> Result<Vec<ClientDataset>, DataError> {
        let raw = load_idx(&self.images, &self.labels)?;
        let root = RngStream::new(self.seed);
        let mut keep: Vec<usize> = (0..raw.len()).collect();
        if let Some(max) = self.max_samples {
            if max < keep.len() {
                keep.shuffle(&mut root.derive(&[0]));
                keep.truncate(max);
                keep.sort_unstable();
            }
        }
        let labels: Vec<usize> = keep.iter().map(|&i| raw.labels[i]).collect();
        let num_classes = labels.iter().max().map_or(0, |v| v + 1);
        let parts = dirichlet_partition(
            &labels,
            &PartitionConfig::new(self.dirichlet_alpha, self.num_clients),
            &mut root.derive(&[1]),
        )?;
        parts
            .into_iter()
            .enumerate()
            .map(|(client, idx)| {
                let features = idx.iter().map(|&i| raw.features[keep[i]].clone()).collect();
                let ls = idx.iter().map(|&i| labels[i]).collect();
                ClientDataset::with_split(
                    client,
                    num_classes,
                    features,
                    ls,
                    &mut root.derive(&[2, client as u64]),
                )
            })
            .collect()
    }
}
