use serde::{Deserialize, Serialize};

use super::ParamTensors;

/// Mini-batch SGD with classical momentum and L2 weight decay:
/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one per parameter tensor, created lazily.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn step_tensor(&self, p: &mut [f64], g: &[f64], v: &mut [f64], decay: bool) {
        let wd = if decay { self.weight_decay } else { 0.0 };
        for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = self.momentum * *vi + (gi + wd * *pi);
            *pi -= self.lr * *vi;
        }
    }

    /// One update over every tensor of `params`, followed by projection.
    /// `grads` lists one slice per tensor of `params`, in the same order.
    pub fn step<P: ParamTensors>(&self, params: &mut P, grads: &[&[f64]], state: &mut SgdState) {
        let decays: Vec<bool> = (0..params.tensors().len())
            .map(|i| params.decays(i))
            .collect();
        let gs = grads;
        let mut ps = params.tensors_mut();
        assert_eq!(ps.len(), gs.len(), "gradient tensor count");
        if state.velocity.len() != ps.len() {
            state.velocity = ps.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (i, (p, g)) in ps.iter_mut().zip(gs).enumerate() {
            self.step_tensor(p, g, &mut state.velocity[i], decays[i]);
        }
        drop(ps);
        params.project();
    }
}
