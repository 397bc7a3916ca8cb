#![allow(dead_code)]

use pfedgm_core::datagen::ClientDataset;
use pfedgm_core::numcore::RngStream;

pub fn rand_vec(n: usize, scale: f64, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| scale * rng.standard_normal()).collect()
}

/// Two Gaussian blobs at `±sep` along the first axis, `n` samples each.
pub fn two_blobs(client_id: usize, n: usize, dim: usize, sep: f64, seed: u64) -> ClientDataset {
    let mut rng = RngStream::new(seed);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..2 * n {
        let y = i % 2;
        let mut x = rand_vec(dim, 0.5, &mut rng);
        x[0] += if y == 0 { sep } else { -sep };
        features.push(x);
        labels.push(y);
    }
    ClientDataset::with_split(client_id, 2, features, labels, &mut rng).unwrap()
}

/// `k` well-separated classes in `dim` dimensions with noise `noise`.
pub fn blobs(
    client_id: usize,
    k: usize,
    per_class: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> ClientDataset {
    let mut rng = RngStream::new(seed);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            (0..dim)
                .map(|j| if j % k == c { 2.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..k * per_class {
        let y = i % k;
        let x: Vec<f64> = centers[y]
            .iter()
            .map(|c| c + noise * rng.standard_normal())
            .collect();
        features.push(x);
        labels.push(y);
    }
    ClientDataset::with_split(client_id, k, features, labels, &mut rng).unwrap()
}
