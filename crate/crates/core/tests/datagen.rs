use std::collections::{BTreeMap, BTreeSet};

use pfedgm_core::datagen::{
    analytic_resample_params, dirichlet_partition, generate_client_dataset, MixtureSpec,
    PartitionConfig, ResampleWeight,
};
use pfedgm_core::numcore::{DiagMat, RngStream};

fn mean_distinct_classes(alpha: f64, seed: u64) -> f64 {
    let (k, m) = (10, 100);
    let labels: Vec<usize> = (0..k * 500).map(|i| i % k).collect();
    let parts = dirichlet_partition(
        &labels,
        &PartitionConfig::new(alpha, m),
        &mut RngStream::new(seed),
    )
    .unwrap();
    let distinct: usize = parts
        .iter()
        .map(|p| p.iter().map(|&i| labels[i]).collect::<BTreeSet<_>>().len())
        .sum();
    distinct as f64 / m as f64
}

#[test]
fn lower_alpha_gives_fewer_classes_per_client() {
    let low: f64 = (0..10).map(|s| mean_distinct_classes(0.1, s)).sum::<f64>() / 10.0;
    let high: f64 = (0..10).map(|s| mean_distinct_classes(0.5, s)).sum::<f64>() / 10.0;
    assert!(low < high, "alpha 0.1: {low}, alpha 0.5: {high}");
}

#[test]
fn displaced_centers_shift_class_means_by_analytic_amount() {
    let d = 2;
    let spec = MixtureSpec {
        means: vec![vec![0.5, -0.5], vec![-1.0, 1.0]],
        covs: vec![DiagMat::new(vec![1.0, 0.5]).unwrap(), DiagMat::identity(d)],
        weights: vec![0.5, 0.5],
    };
    let delta = [0.8, -0.4];
    let omega = DiagMat::new(vec![1.5, 2.0]).unwrap();
    let counts = BTreeMap::from([(0, 20_000)]);
    let mut means = Vec::new();
    let mut analytic = Vec::new();
    for (id, sign) in [(0usize, 1.0), (1, -1.0)] {
        let center: Vec<f64> = spec.means[0]
            .iter()
            .zip(&delta)
            .map(|(m, e)| m + sign * e)
            .collect();
        analytic.push(analytic_resample_params(&spec.means[0], &spec.covs[0], &center, &omega).0);
        let w = BTreeMap::from([(
            0,
            ResampleWeight {
                center,
                cov: omega.clone(),
            },
        )]);
        let ds =
            generate_client_dataset(&spec, &w, &counts, id, &mut RngStream::new(40 + id as u64))
                .unwrap();
        let n = ds.features.len() as f64;
        means.push(
            (0..d)
                .map(|j| ds.features.iter().map(|x| x[j]).sum::<f64>() / n)
                .collect::<Vec<_>>(),
        );
    }
    for j in 0..d {
        let empirical = means[0][j] - means[1][j];
        let expected = analytic[0][j] - analytic[1][j];
        assert!(
            (empirical - expected).abs() < 0.05,
            "axis {j}: {empirical} vs {expected}"
        );
    }
}

#[test]
fn partition_is_reproducible_per_seed() {
    let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let cfg = PartitionConfig::new(0.3, 7);
    let a = dirichlet_partition(&labels, &cfg, &mut RngStream::new(9)).unwrap();
    let b = dirichlet_partition(&labels, &cfg, &mut RngStream::new(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn infeasible_partition_reports_error() {
    // More clients than samples can never leave every client non-empty.
    let labels = vec![0, 1, 0];
    let cfg = PartitionConfig {
        max_retries: 5,
        ..PartitionConfig::new(1.0, 10)
    };
    assert!(dirichlet_partition(&labels, &cfg, &mut RngStream::new(0)).is_err());
}
