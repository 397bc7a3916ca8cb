//! Numeric building blocks shared by every other module: seeded random
//! streams, diagonal matrices with a positivity floor, stable reductions and
//! central finite differences.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Floor applied to every diagonal covariance / precision entry.
pub const EPS_PD: f64 = 1e-6;

/// A seeded random stream.
///
/// Sub-streams are derived from `(seed, tags...)` by hashing, so a client
/// task can obtain its own stream from `(master_seed, client_id, round)`
/// without coordinating with anyone else.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by this stream's seed and `tags`. Does not
    /// consume state from `self`.
    pub fn derive(&self, tags: &[u64]) -> RngStream {
        let mut h = splitmix64(self.seed);
        for &t in tags {
            h = splitmix64(h ^ splitmix64(t.wrapping_add(0xA076_1D64_78BD_642F)));
        }
        RngStream::new(h)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Diagonal positive matrix; every entry is kept at or above [`EPS_PD`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DiagMat(Vec<f64>);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("diagonal entry {index} = {value} is not a finite value >= {EPS_PD:e}")]
pub struct NotPositive {
    pub index: usize,
    pub value: f64,
}

impl DiagMat {
    pub fn identity(d: usize) -> Self {
        DiagMat(vec![1.0; d])
    }

    pub fn scaled_identity(d: usize, c: f64) -> Self {
        DiagMat::projected(vec![c; d])
    }

    /// Checked constructor.
    pub fn new(diag: Vec<f64>) -> Result<Self, NotPositive> {
        if let Some((index, &value)) = diag
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < EPS_PD)
        {
            return Err(NotPositive { index, value });
        }
        Ok(DiagMat(diag))
    }

    /// Clamps every entry up to the floor. NaN entries become the floor.
    pub fn projected(mut diag: Vec<f64>) -> Self {
        project_floor(&mut diag, EPS_PD);
        DiagMat(diag)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.0
    }

    /// Mutable access for optimizers; callers must call [`DiagMat::project`]
    /// after writing.
    pub(crate) fn diag_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn project(&mut self) {
        project_floor(&mut self.0, EPS_PD);
    }

    pub fn inverse(&self) -> DiagMat {
        DiagMat::projected(self.0.iter().map(|v| 1.0 / v).collect())
    }

    pub fn sqrt(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.sqrt()).collect()
    }

    /// `(x - m)^T diag (x - m)`
    pub fn quad_form(&self, x: &[f64], m: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x.iter().zip(m))
            .map(|(a, (xi, mi))| a * (xi - mi) * (xi - mi))
            .sum()
    }
}

impl TryFrom<Vec<f64>> for DiagMat {
    type Error = NotPositive;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        DiagMat::new(v)
    }
}

impl From<DiagMat> for Vec<f64> {
    fn from(m: DiagMat) -> Vec<f64> {
        m.0
    }
}

pub(crate) fn project_floor(v: &mut [f64], floor: f64) {
    for x in v.iter_mut() {
        if x.is_nan() || *x < floor {
            *x = floor;
        }
    }
}

/// `mean + sqrt(cov) ⊙ N(0, I)`
pub fn sample_gaussian(mean: &[f64], cov: &DiagMat, rng: &mut RngStream) -> Vec<f64> {
    debug_assert_eq!(mean.len(), cov.dim());
    mean.iter()
        .zip(cov.diag())
        .map(|(m, v)| m + v.sqrt() * rng.standard_normal())
        .collect()
}

/// `log Σ exp(values)` via max-shift. Returns `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    if values.len() == 1 {
        return values[0];
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// Numerically stable softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(values);
    values.iter().map(|v| (v - lse).exp()).collect()
}

/// Central differences: entry j is `(f(x + h e_j) - f(x - h e_j)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = probe[j];
            probe[j] = orig + h;
            let fp = f(&probe);
            probe[j] = orig - h;
            let fm = f(&probe);
            probe[j] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Arithmetic mean and population (N-divisor) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn gaussian_draws_are_deterministic() {
        let mean = vec![0.0; 4];
        let cov = DiagMat::identity(4);
        let a = sample_gaussian(&mean, &cov, &mut RngStream::new(7));
        let b = sample_gaussian(&mean, &cov, &mut RngStream::new(7));
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn vanishing_variance_collapses_to_mean() {
        let mean = vec![1.5, -3.0, 0.25];
        let cov = DiagMat::scaled_identity(3, EPS_PD);
        let x = sample_gaussian(&mean, &cov, &mut RngStream::new(1));
        for (a, b) in x.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-2);
        }
    }

    #[test]
    fn gaussian_moments_converge() {
        let mean = vec![1.0, 2.0];
        let cov = DiagMat::new(vec![4.0, 9.0]).unwrap();
        let mut rng = RngStream::new(2024);
        let n = 100_000;
        let mut s = [0.0; 2];
        let mut s2 = [0.0; 2];
        for _ in 0..n {
            let x = sample_gaussian(&mean, &cov, &mut rng);
            for j in 0..2 {
                s[j] += x[j];
                s2[j] += x[j] * x[j];
            }
        }
        for j in 0..2 {
            let m = s[j] / n as f64;
            let v = s2[j] / n as f64 - m * m;
            assert!((m - mean[j]).abs() < 0.05, "mean {j}: {m}");
            assert!((v - cov.diag()[j]).abs() < 0.2, "var {j}: {v}");
            // five standard errors
            let se_mean = (cov.diag()[j] / n as f64).sqrt();
            assert!((m - mean[j]).abs() < 5.0 * se_mean);
            let se_var = cov.diag()[j] * (2.0 / n as f64).sqrt();
            assert!((v - cov.diag()[j]).abs() < 5.0 * se_var);
        }
    }

    #[test]
    fn derived_streams_differ_and_repeat() {
        let root = RngStream::new(11);
        let mut a = root.derive(&[3, 0]);
        let mut b = root.derive(&[3, 1]);
        let mut a2 = root.derive(&[3, 0]);
        let xa = a.next_u64();
        assert_ne!(xa, b.next_u64());
        assert_eq!(xa, a2.next_u64());
    }

    #[test]
    fn log_sum_exp_cases() {
        assert_eq!(log_sum_exp(&[0.0]), 0.0);
        let a = 1000.0;
        let v = log_sum_exp(&[a, a]);
        assert!((v - (a + 2f64.ln())).abs() < 1e-9);
        // direct summation is safe at this magnitude
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((log_sum_exp(&[1.0, 2.0, 3.0]) - direct).abs() < 1e-14);
        assert!((direct - 3.40760596).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_quadratic() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, -2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] + 4.0).abs() < 1e-8);
        let z = finite_diff_grad(|_| 3.0, &[1.0, 2.0, 3.0], 1e-3);
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn diag_mat_rejects_and_projects() {
        assert!(DiagMat::new(vec![1.0, 0.0]).is_err());
        assert!(DiagMat::new(vec![1.0, f64::NAN]).is_err());
        let p = DiagMat::projected(vec![-1.0, 2.0, f64::NAN]);
        assert_eq!(p.diag(), &[EPS_PD, 2.0, EPS_PD]);
    }

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        assert_eq!(mean_std(&[0.0, 1.0]), (0.5, 0.5));
    }

    proptest! {
        #[test]
        fn log_sum_exp_shift(values in proptest::collection::vec(-50.0f64..50.0, 1..8), c in -500.0f64..500.0) {
            let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
            let lhs = log_sum_exp(&shifted);
            let rhs = log_sum_exp(&values) + c;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }

        #[test]
        fn softmax_normalized(values in proptest::collection::vec(-700.0f64..700.0, 1..10)) {
            let p = softmax(&values);
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
