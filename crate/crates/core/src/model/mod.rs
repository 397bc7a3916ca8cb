//! Generator network with hand-written backpropagation, and the decoupled
//! classifier state: the navigator (class means and biases trained under unit
//! covariance) and the covariance bank (per-class diagonal precisions).

pub mod checkpoint;
pub mod sgd;

use serde::{Deserialize, Serialize};

use crate::numcore::{DiagMat, RngStream};

pub use checkpoint::{Checkpoint, SeedLineage};
pub use sgd::{Sgd, SgdState};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid layer dimensions {0:?}")]
    InvalidDims(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] serde_json::Error),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer, weights stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }
}

/// The feature extractor: a multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub layers: Vec<Layer>,
}

/// Intermediates of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// `inputs[l][b]` is the input of layer `l` for sample `b`.
    inputs: Vec<Vec<Vec<f64>>>,
    /// `pre[l][b]` is the pre-activation of layer `l` for sample `b`.
    pre: Vec<Vec<Vec<f64>>>,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn pre_activations(&self, layer: usize) -> &[Vec<f64>] {
        &self.pre[layer]
    }
}

impl GeneratorParams {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.out_dim));
        d
    }

    /// Same architecture, all parameters zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim, l.activation))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward<X: AsRef<[f64]>>(
        &self,
        batch: &[X],
    ) -> Result<(Vec<Vec<f64>>, ForwardTape), ModelError> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur: Vec<Vec<f64>> = batch
            .iter()
            .map(|x| {
                let x = x.as_ref();
                if x.len() != self.input_dim() {
                    return Err(ModelError::DimensionMismatch {
                        what: "generator input",
                        expected: self.input_dim(),
                        found: x.len(),
                    });
                }
                Ok(x.to_vec())
            })
            .collect::<Result<_, _>>()?;
        for layer in &self.layers {
            let a: Vec<Vec<f64>> = cur.iter().map(|x| layer.affine(x)).collect();
            let out = match layer.activation {
                Activation::Identity => a.clone(),
                Activation::Relu => a
                    .iter()
                    .map(|v| v.iter().map(|&u| if u > 0.0 { u } else { 0.0 }).collect())
                    .collect(),
            };
            inputs.push(std::mem::replace(&mut cur, out));
            pre.push(a);
        }
        Ok((cur, ForwardTape { inputs, pre }))
    }

    /// Forward pass without keeping intermediates.
    pub fn embed<X: AsRef<[f64]>>(&self, batch: &[X]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.forward(batch).map(|(z, _)| z)
    }

    /// Reverse-mode gradients of `Σ_b L_b` given `dL/dz` per sample. Returns
    /// parameter gradients (same layout as `self`) and `dL/dx`.
    pub fn backward(
        &self,
        tape: &ForwardTape,
        dl_dz: &[Vec<f64>],
    ) -> Result<(GeneratorParams, Vec<Vec<f64>>), ModelError> {
        if dl_dz.len() != tape.batch_size() || tape.inputs.len() != self.layers.len() {
            return Err(ModelError::DimensionMismatch {
                what: "upstream gradient batch",
                expected: tape.batch_size(),
                found: dl_dz.len(),
            });
        }
        if let Some(g) = dl_dz.iter().find(|g| g.len() != self.output_dim()) {
            return Err(ModelError::DimensionMismatch {
                what: "upstream gradient",
                expected: self.output_dim(),
                found: g.len(),
            });
        }
        let mut grads = self.zeros_like();
        let mut delta: Vec<Vec<f64>> = dl_dz.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (d, a) in delta.iter_mut().zip(&tape.pre[l]) {
                    for (di, ai) in d.iter_mut().zip(a) {
                        if *ai <= 0.0 {
                            *di = 0.0;
                        }
                    }
                }
            }
            let g = &mut grads.layers[l];
            for (d, x) in delta.iter().zip(&tape.inputs[l]) {
                for (o, &dov) in d.iter().enumerate() {
                    if dov == 0.0 {
                        continue;
                    }
                    g.bias[o] += dov;
                    let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (w, xi) in row.iter_mut().zip(x) {
                        *w += dov * xi;
                    }
                }
            }
            delta = delta
                .iter()
                .map(|d| {
                    let mut dx = vec![0.0; layer.in_dim];
                    for (o, &dov) in d.iter().enumerate() {
                        if dov == 0.0 {
                            continue;
                        }
                        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (dxi, w) in dx.iter_mut().zip(row) {
                            *dxi += dov * w;
                        }
                    }
                    dx
                })
                .collect();
        }
        Ok((grads, delta))
    }
}

/// Class means and biases; the separation objective uses unit covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Navigator {
    pub means: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl Navigator {
    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            means: vec![vec![0.0; d]; k],
            biases: vec![0.0; k],
        }
    }

    pub fn num_params(&self) -> usize {
        self.means.iter().map(Vec::len).sum::<usize>() + self.biases.len()
    }
}

/// Per-class diagonal precision matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceBank {
    pub precisions: Vec<DiagMat>,
}

impl CovarianceBank {
    pub fn num_classes(&self) -> usize {
        self.precisions.len()
    }

    pub fn project(&mut self) {
        for p in &mut self.precisions {
            p.project();
        }
    }
}

/// Uniform access to parameter tensors, used by the optimizer and by
/// server-side averaging.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    /// Whether weight decay applies to tensor `i`.
    fn decays(&self, _i: usize) -> bool {
        true
    }

    /// Restores invariants after a raw write.
    fn project(&mut self) {}
}

impl ParamTensors for GeneratorParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

impl ParamTensors for Navigator {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = self.means.iter().map(Vec::as_slice).collect();
        t.push(&self.biases);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = self.means.iter_mut().map(Vec::as_mut_slice).collect();
        t.push(&mut self.biases);
        t
    }

    fn decays(&self, i: usize) -> bool {
        i < self.means.len()
    }
}

impl ParamTensors for CovarianceBank {
    fn tensors(&self) -> Vec<&[f64]> {
        self.precisions.iter().map(DiagMat::diag).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.precisions.iter_mut().map(DiagMat::diag_mut).collect()
    }

    fn decays(&self, _i: usize) -> bool {
        false
    }

    fn project(&mut self) {
        CovarianceBank::project(self)
    }
}

/// MLP with explicit per-layer activations. Weights ~ N(0, 2/fan_in) for
/// ReLU layers (He) and N(0, 1/fan_in) otherwise; biases zero.
pub fn init_mlp(
    dims: &[usize],
    activations: &[Activation],
    rng: &mut RngStream,
) -> Result<GeneratorParams, ModelError> {
    if dims.len() < 2 || dims.contains(&0) || activations.len() != dims.len() - 1 {
        return Err(ModelError::InvalidDims(dims.to_vec()));
    }
    let layers = dims
        .windows(2)
        .zip(activations)
        .map(|(w, &act)| {
            let (fan_in, out) = (w[0], w[1]);
            let gain = if act == Activation::Relu { 2.0 } else { 1.0 };
            let std = (gain / fan_in as f64).sqrt();
            Layer {
                in_dim: fan_in,
                out_dim: out,
                weights: (0..fan_in * out)
                    .map(|_| std * rng.standard_normal())
                    .collect(),
                bias: vec![0.0; out],
                activation: act,
            }
        })
        .collect();
    Ok(GeneratorParams { layers })
}

/// Generator with ReLU hidden layers and an identity output layer.
pub fn init_generator(dims: &[usize], rng: &mut RngStream) -> Result<GeneratorParams, ModelError> {
    let n = dims.len().saturating_sub(1);
    let acts: Vec<Activation> = (0..n)
        .map(|i| {
            if i + 1 == n {
                Activation::Identity
            } else {
                Activation::Relu
            }
        })
        .collect();
    init_mlp(dims, &acts, rng)
}

/// Means ~ N(0, (1/√d)²) per entry, zero biases.
pub fn init_navigator(k: usize, d: usize, rng: &mut RngStream) -> Navigator {
    let std = 1.0 / (d as f64).sqrt();
    Navigator {
        means: (0..k)
            .map(|_| (0..d).map(|_| std * rng.standard_normal()).collect())
            .collect(),
        biases: vec![0.0; k],
    }
}

/// Every precision starts at the identity.
pub fn init_covariance_bank(k: usize, d: usize) -> CovarianceBank {
    CovarianceBank {
        precisions: vec![DiagMat::identity(d); k],
    }
}
