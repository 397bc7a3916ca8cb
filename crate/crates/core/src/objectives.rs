//! Training objectives on the representation space and their analytic
//! gradients.
//!
//! * shared loss `H`: negative log posterior of a Gaussian mixture with unit
//!   covariances, driving inter-class separation;
//! * covariance loss `Ĥ`: the same posterior with the bank's precisions,
//!   differentiated only with respect to those precisions;
//! * personal loss `R`: squared distance of each representation to its
//!   client-class prototype, scaled by `1/(n·d)`, with prototypes held
//!   constant during differentiation.
//!
//! All batch reductions are means.

use serde::{Deserialize, Serialize};

use crate::model::{CovarianceBank, GeneratorParams, ModelError, Navigator};
use crate::numcore::{log_sum_exp, softmax, sq_dist};

/// `logit_i = −½ (z−μ_i)ᵀ A_i (z−μ_i) + b_i`
pub fn gaussian_logits(z: &[f64], nav: &Navigator, bank: &CovarianceBank) -> Vec<f64> {
    nav.means
        .iter()
        .zip(&nav.biases)
        .zip(&bank.precisions)
        .map(|((mu, b), a)| -0.5 * a.quad_form(z, mu) + b)
        .collect()
}

/// Logits with every precision fixed to the identity.
pub fn unit_logits(z: &[f64], nav: &Navigator) -> Vec<f64> {
    nav.means
        .iter()
        .zip(&nav.biases)
        .map(|(mu, b)| -0.5 * sq_dist(z, mu) + b)
        .collect()
}

/// Softmax of the logits.
pub fn class_posterior(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}

/// Shared loss and its gradients with respect to `z`, the navigator means
/// and the navigator biases.
#[derive(Debug, Clone)]
pub struct SharedGrads {
    pub loss: f64,
    pub dz: Vec<Vec<f64>>,
    pub dmeans: Vec<Vec<f64>>,
    pub dbiases: Vec<f64>,
}

impl SharedGrads {
    /// Navigator gradient tensors in [`crate::model::ParamTensors`] order.
    pub fn navigator_tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = self.dmeans.iter().map(Vec::as_slice).collect();
        t.push(&self.dbiases);
        t
    }
}

pub fn shared_loss_and_grads(
    z_batch: &[Vec<f64>],
    y_batch: &[usize],
    nav: &Navigator,
) -> SharedGrads {
    let (k, d) = (nav.num_classes(), nav.dim());
    let n = z_batch.len();
    let mut out = SharedGrads {
        loss: 0.0,
        dz: Vec::with_capacity(n),
        dmeans: vec![vec![0.0; d]; k],
        dbiases: vec![0.0; k],
    };
    if n == 0 {
        return out;
    }
    let inv_n = 1.0 / n as f64;
    for (z, &y) in z_batch.iter().zip(y_batch) {
        let logits = unit_logits(z, nav);
        let lse = log_sum_exp(&logits);
        out.loss += (lse - logits[y]) * inv_n;
        let p: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        // dH/dz = −μ_y + Σ P_i μ_i
        let mut dz: Vec<f64> = nav.means[y].iter().map(|m| -m).collect();
        for (pi, mu) in p.iter().zip(&nav.means) {
            for (g, m) in dz.iter_mut().zip(mu) {
                *g += pi * m;
            }
        }
        dz.iter_mut().for_each(|g| *g *= inv_n);
        out.dz.push(dz);
        // dH/dμ_i = (P_i − 1{i=y}) (z − μ_i);  dH/db_i = P_i − 1{i=y}
        for i in 0..k {
            let e = p[i] - if i == y { 1.0 } else { 0.0 };
            out.dbiases[i] += e * inv_n;
            for ((g, zj), mj) in out.dmeans[i].iter_mut().zip(z).zip(&nav.means[i]) {
                *g += e * (zj - mj) * inv_n;
            }
        }
    }
    out
}

/// Covariance loss and its gradient with respect to each precision diagonal.
/// Representations and navigator are constants here.
#[derive(Debug, Clone)]
pub struct CovarianceGrads {
    pub loss: f64,
    pub dprecisions: Vec<Vec<f64>>,
}

impl CovarianceGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.dprecisions.iter().map(Vec::as_slice).collect()
    }
}

pub fn covariance_loss_and_grad(
    z_batch: &[Vec<f64>],
    y_batch: &[usize],
    nav: &Navigator,
    bank: &CovarianceBank,
) -> CovarianceGrads {
    let (k, d) = (nav.num_classes(), nav.dim());
    let n = z_batch.len();
    let mut out = CovarianceGrads {
        loss: 0.0,
        dprecisions: vec![vec![0.0; d]; k],
    };
    if n == 0 {
        return out;
    }
    let inv_n = 1.0 / n as f64;
    for (z, &y) in z_batch.iter().zip(y_batch) {
        let logits = gaussian_logits(z, nav, bank);
        let lse = log_sum_exp(&logits);
        out.loss += (lse - logits[y]) * inv_n;
        // dlogit_i/dA_ij = −½ (z_j − μ_ij)²
        for i in 0..k {
            let e = (logits[i] - lse).exp() - if i == y { 1.0 } else { 0.0 };
            for ((g, zj), mj) in out.dprecisions[i].iter_mut().zip(z).zip(&nav.means[i]) {
                *g -= 0.5 * e * (zj - mj) * (zj - mj) * inv_n;
            }
        }
    }
    out
}

/// Per-client, per-class mean representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub means: Vec<Vec<f64>>,
    pub present: Vec<bool>,
    pub ema_rate: f64,
}

pub const DEFAULT_EMA_RATE: f64 = 0.1;

impl Prototypes {
    pub fn empty(k: usize, d: usize, ema_rate: f64) -> Self {
        Self {
            means: vec![vec![0.0; d]; k],
            present: vec![false; k],
            ema_rate,
        }
    }

    /// Exact class means of the given representations.
    pub fn from_representations(z: &[Vec<f64>], y: &[usize], k: usize, ema_rate: f64) -> Self {
        let d = z.first().map_or(0, Vec::len);
        let mut p = Self::empty(k, d, ema_rate);
        let mut counts = vec![0usize; k];
        for (zi, &yi) in z.iter().zip(y) {
            counts[yi] += 1;
            for (m, v) in p.means[yi].iter_mut().zip(zi) {
                *m += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                p.present[c] = true;
                let inv = 1.0 / counts[c] as f64;
                p.means[c].iter_mut().for_each(|m| *m *= inv);
            }
        }
        p
    }

    pub fn num_present(&self) -> usize {
        self.present.iter().filter(|p| **p).count()
    }

    /// `υ_k ← (1−r)·υ_k + r·(batch mean of class k)` for every class in the
    /// batch; a class seen for the first time takes the batch mean.
    pub fn update(&mut self, z_batch: &[Vec<f64>], y_batch: &[usize]) {
        let k = self.means.len();
        let batch = Prototypes::from_representations(z_batch, y_batch, k, self.ema_rate);
        let r = self.ema_rate;
        for c in 0..k {
            if !batch.present[c] {
                continue;
            }
            if self.present[c] {
                for (m, b) in self.means[c].iter_mut().zip(&batch.means[c]) {
                    *m = (1.0 - r) * *m + r * b;
                }
            } else {
                self.means[c] = batch.means[c].clone();
                self.present[c] = true;
            }
        }
    }
}

/// Prototypes of a client's training data under a given generator.
pub fn compute_prototypes_exact<X: AsRef<[f64]>>(
    features: &[X],
    labels: &[usize],
    gen: &GeneratorParams,
    num_classes: usize,
    ema_rate: f64,
) -> Result<Prototypes, ModelError> {
    let z = gen.embed(features)?;
    let mut p = Prototypes::from_representations(&z, labels, num_classes, ema_rate);
    if z.is_empty() {
        p.means = vec![vec![0.0; gen.output_dim()]; num_classes];
    }
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct PersonalGrads {
    pub loss: f64,
    pub dz: Vec<Vec<f64>>,
    /// Samples whose class has no prototype; they contribute nothing.
    pub missing: usize,
}

/// `R = (1/(n·d)) Σ ‖z_i − υ_{y_i}‖²`, `dR/dz_i = (2/(n·d)) (z_i − υ_{y_i})`.
pub fn personal_loss_and_grad(
    z_batch: &[Vec<f64>],
    y_batch: &[usize],
    protos: &Prototypes,
    d: usize,
) -> PersonalGrads {
    let n = z_batch.len();
    let mut out = PersonalGrads {
        loss: 0.0,
        dz: Vec::with_capacity(n),
        missing: 0,
    };
    if n == 0 {
        return out;
    }
    let scale = 1.0 / (n * d) as f64;
    for (z, &y) in z_batch.iter().zip(y_batch) {
        if !protos.present.get(y).copied().unwrap_or(false) {
            out.missing += 1;
            out.dz.push(vec![0.0; z.len()]);
            continue;
        }
        let u = &protos.means[y];
        out.loss += scale * sq_dist(z, u);
        out.dz.push(
            z.iter()
                .zip(u)
                .map(|(a, b)| 2.0 * scale * (a - b))
                .collect(),
        );
    }
    out
}

/// Loss accounting of one composite step: `total = H + λ·R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub h: f64,
    pub r: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(h: f64, r: f64, lambda: f64) -> Self {
        Self {
            h,
            r,
            lambda,
            total: h + lambda * r,
        }
    }
}
