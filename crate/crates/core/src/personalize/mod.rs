//! Phase 2: per-client fusion heads on frozen-generator representations.
//!
//! The fused logit of class `i` is `ξ_i + ζ_i + β_i` with
//!
//! * `ξ_i = −½ (z−μ*_i−μ_i)ᵀ A_g A*_i (z−μ*_i−μ_i)` (global Gaussian score),
//! * `ζ_i = −(λ/d) (z−υ_i)ᵀ A_c (z−υ_i)` (local prototype score, zero for
//!   classes absent from the client),
//! * `β_i = b*_i + b_i`.
//!
//! Starred quantities come from Phase 1; `μ_i`, `b_i`, `A_g`, `A_c` belong to
//! the head.

pub mod lbfgs;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::ClientDataset;
use crate::fedsim::{accuracy, ServerState};
use crate::model::{CovarianceBank, ModelError, Navigator, ParamTensors, Sgd, SgdState};
use crate::numcore::{argmax, log_sum_exp, project_floor, softmax, RngStream, EPS_PD};
use crate::objectives::{gaussian_logits, Prototypes, DEFAULT_EMA_RATE};

pub use lbfgs::{Lbfgs, LbfgsConfig, LbfgsReport};

const TAG_PHASE2: u64 = 0x9E125;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionHead {
    pub mean_offsets: Vec<Vec<f64>>,
    pub bias_offsets: Vec<f64>,
    /// Diagonal gain on the global precision, floored at `EPS_PD`.
    pub gain_global: Vec<f64>,
    /// Diagonal gain on the local term, floored at 0.
    pub gain_local: Vec<f64>,
}

impl FusionHead {
    pub fn init(k: usize, d: usize) -> Self {
        Self {
            mean_offsets: vec![vec![0.0; d]; k],
            bias_offsets: vec![0.0; k],
            gain_global: vec![1.0; d],
            gain_local: vec![1.0; d],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias_offsets.len()
    }
}

impl ParamTensors for FusionHead {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = self.mean_offsets.iter().map(Vec::as_slice).collect();
        t.extend([
            self.bias_offsets.as_slice(),
            &self.gain_global,
            &self.gain_local,
        ]);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = self
            .mean_offsets
            .iter_mut()
            .map(Vec::as_mut_slice)
            .collect();
        t.push(&mut self.bias_offsets);
        t.push(&mut self.gain_global);
        t.push(&mut self.gain_local);
        t
    }

    fn decays(&self, i: usize) -> bool {
        i < self.mean_offsets.len()
    }

    fn project(&mut self) {
        project_floor(&mut self.gain_global, EPS_PD);
        project_floor(&mut self.gain_local, 0.0);
    }
}

/// Everything Phase 2 needs for one client: frozen global statistics, local
/// prototypes and cached train representations.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalContext {
    pub client_id: usize,
    pub nav: Navigator,
    pub bank: CovarianceBank,
    pub prototypes: Prototypes,
    pub z: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub lambda: f64,
}

impl PersonalContext {
    /// Builds a context from representations already computed by the frozen
    /// generator. Classes without samples are masked.
    pub fn from_representations(
        client_id: usize,
        z: Vec<Vec<f64>>,
        y: Vec<usize>,
        nav: Navigator,
        bank: CovarianceBank,
        lambda: f64,
    ) -> Self {
        let mut prototypes =
            Prototypes::from_representations(&z, &y, nav.num_classes(), DEFAULT_EMA_RATE);
        if z.is_empty() {
            prototypes.means = vec![vec![0.0; nav.dim()]; nav.num_classes()];
        }
        Self {
            client_id,
            nav,
            bank,
            prototypes,
            z,
            y,
            lambda,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.nav.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.nav.dim()
    }
}

pub fn build_context(
    client: &ClientDataset,
    state: &ServerState,
    lambda: f64,
) -> Result<PersonalContext, ModelError> {
    let z = state.gen.embed(&client.train_features())?;
    Ok(PersonalContext::from_representations(
        client.client_id,
        z,
        client.train_labels(),
        state.nav.clone(),
        state.bank.clone(),
        lambda,
    ))
}

/// Bias-free part `ξ_i + ζ_i + b*_i` of the fused logits.
fn base_logits(z: &[f64], ctx: &PersonalContext, head: &FusionHead) -> Vec<f64> {
    let scale = ctx.lambda / ctx.dim() as f64;
    (0..ctx.num_classes())
        .map(|i| {
            let (mu, off, a) = (
                &ctx.nav.means[i],
                &head.mean_offsets[i],
                ctx.bank.precisions[i].diag(),
            );
            let mut xi = 0.0;
            for j in 0..z.len() {
                let r = z[j] - mu[j] - off[j];
                xi += head.gain_global[j] * a[j] * r * r;
            }
            let mut zeta = 0.0;
            if ctx.prototypes.present[i] {
                let u = &ctx.prototypes.means[i];
                for j in 0..z.len() {
                    let r = z[j] - u[j];
                    zeta += head.gain_local[j] * r * r;
                }
            }
            -0.5 * xi - scale * zeta + ctx.nav.biases[i]
        })
        .collect()
}

pub fn fusion_logits(z: &[f64], ctx: &PersonalContext, head: &FusionHead) -> Vec<f64> {
    let mut l = base_logits(z, ctx, head);
    for (li, b) in l.iter_mut().zip(&head.bias_offsets) {
        *li += b;
    }
    l
}

/// Class id (smallest on ties) and posterior.
pub fn predict(z: &[f64], ctx: &PersonalContext, head: &FusionHead) -> (usize, Vec<f64>) {
    let p = softmax(&fusion_logits(z, ctx, head));
    (argmax(&p), p)
}

/// Gradients of the fusion loss, laid out like [`FusionHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub loss: f64,
    pub head: FusionHead,
}

/// Batch-mean cross-entropy over the fused logits and its gradient with
/// respect to every head block.
pub fn fusion_loss_and_grads(
    z_batch: &[Vec<f64>],
    y_batch: &[usize],
    ctx: &PersonalContext,
    head: &FusionHead,
) -> FusionGrads {
    let (k, d) = (ctx.num_classes(), ctx.dim());
    let mut g = FusionHead {
        mean_offsets: vec![vec![0.0; d]; k],
        bias_offsets: vec![0.0; k],
        gain_global: vec![0.0; d],
        gain_local: vec![0.0; d],
    };
    let n = z_batch.len();
    if n == 0 {
        return FusionGrads { loss: 0.0, head: g };
    }
    let inv_n = 1.0 / n as f64;
    let scale = ctx.lambda / d as f64;
    let mut loss = 0.0;
    for (z, &y) in z_batch.iter().zip(y_batch) {
        let logits = fusion_logits(z, ctx, head);
        let lse = log_sum_exp(&logits);
        loss += (lse - logits[y]) * inv_n;
        for i in 0..k {
            let e = ((logits[i] - lse).exp() - if i == y { 1.0 } else { 0.0 }) * inv_n;
            if e == 0.0 {
                continue;
            }
            g.bias_offsets[i] += e;
            let (mu, off, a) = (
                &ctx.nav.means[i],
                &head.mean_offsets[i],
                ctx.bank.precisions[i].diag(),
            );
            for j in 0..d {
                let r = z[j] - mu[j] - off[j];
                g.mean_offsets[i][j] += e * head.gain_global[j] * a[j] * r;
                g.gain_global[j] -= 0.5 * e * a[j] * r * r;
            }
            if ctx.prototypes.present[i] {
                let u = &ctx.prototypes.means[i];
                for j in 0..d {
                    let r = z[j] - u[j];
                    g.gain_local[j] -= e * scale * r * r;
                }
            }
        }
    }
    FusionGrads { loss, head: g }
}

/// Mean fusion loss over the whole cached train set.
pub fn train_loss(ctx: &PersonalContext, head: &FusionHead) -> f64 {
    fusion_loss_and_grads(&ctx.z, &ctx.y, ctx, head).loss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Bias refinement; off yields the head right after SGD fitting.
    pub refine_bias: bool,
    pub lbfgs_cycles: usize,
    pub lbfgs: LbfgsConfig,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 50,
            lr: 0.05,
            momentum: 0.5,
            weight_decay: 5e-4,
            refine_bias: true,
            lbfgs_cycles: 5,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

/// SGD over the cached representations.
pub fn fit_personalized_head(
    ctx: &PersonalContext,
    cfg: &PersonalizeConfig,
    rng: &mut RngStream,
) -> FusionHead {
    let mut head = FusionHead::init(ctx.num_classes(), ctx.dim());
    let sgd = Sgd {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut state = SgdState::default();
    let mut order: Vec<usize> = (0..ctx.z.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let zb: Vec<Vec<f64>> = chunk.iter().map(|&i| ctx.z[i].clone()).collect();
            let yb: Vec<usize> = chunk.iter().map(|&i| ctx.y[i]).collect();
            let g = fusion_loss_and_grads(&zb, &yb, ctx, &head);
            sgd.step(&mut head, &g.head.tensors(), &mut state);
        }
    }
    head
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub loss_before: f64,
    pub loss_after: f64,
    pub iterations: usize,
    /// Objective after every accepted step, across all cycles.
    pub accepted: Vec<f64>,
    pub line_search_failed: bool,
}

/// Optimizes only the bias offsets on the full cached train set, running
/// `lbfgs_cycles` calls of `lbfgs.max_iters` iterations each with shared
/// curvature memory.
pub fn lbfgs_refine_bias(
    ctx: &PersonalContext,
    head: &FusionHead,
    cfg: &PersonalizeConfig,
) -> (FusionHead, RefineReport) {
    let base: Vec<Vec<f64>> = ctx.z.iter().map(|z| base_logits(z, ctx, head)).collect();
    let n = base.len().max(1) as f64;
    let objective = |b: &[f64]| {
        let mut loss = 0.0;
        let mut g = vec![0.0; b.len()];
        for (l0, &y) in base.iter().zip(&ctx.y) {
            let l: Vec<f64> = l0.iter().zip(b).map(|(a, b)| a + b).collect();
            let lse = log_sum_exp(&l);
            loss += (lse - l[y]) / n;
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += ((l[i] - lse).exp() - if i == y { 1.0 } else { 0.0 }) / n;
            }
        }
        (loss, g)
    };
    let mut b = head.bias_offsets.clone();
    let mut opt = Lbfgs::new(cfg.lbfgs);
    let mut report = RefineReport {
        loss_before: objective(&b).0,
        loss_after: 0.0,
        iterations: 0,
        accepted: Vec::new(),
        line_search_failed: false,
    };
    for _ in 0..cfg.lbfgs_cycles {
        let r = opt.minimize(&mut b, objective);
        report.iterations += r.iterations;
        report.accepted.extend(r.accepted);
        if r.line_search_failed {
            report.line_search_failed = true;
            log::debug!("client {}: bias line search failed", ctx.client_id);
            break;
        }
        if r.converged {
            break;
        }
    }
    report.loss_after = objective(&b).0;
    let mut out = head.clone();
    out.bias_offsets = b;
    (out, report)
}

/// Product of two diagonal Gaussians given as (mean, precision): returns the
/// renormalized mean and precision.
pub fn gaussian_product(m1: &[f64], p1: &[f64], m2: &[f64], p2: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let prec: Vec<f64> = p1.iter().zip(p2).map(|(a, b)| a + b).collect();
    let mean = (0..prec.len())
        .map(|j| (p1[j] * m1[j] + p2[j] * m2[j]) / prec[j])
        .collect();
    (mean, prec)
}

/// Posterior of a Gaussian prior after `n` observations that share the
/// precision `obs_prec`: the observations act as one at their mean with
/// precision `n·A`. Returns (mean, precision, combined observation precision).
pub fn fuse_observations(
    prior_mean: &[f64],
    prior_prec: &[f64],
    observations: &[Vec<f64>],
    obs_prec: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = observations.len() as f64;
    let d = prior_mean.len();
    let mut mean_obs = vec![0.0; d];
    for o in observations {
        for (m, v) in mean_obs.iter_mut().zip(o) {
            *m += v / n;
        }
    }
    let combined: Vec<f64> = obs_prec.iter().map(|a| n * a).collect();
    let (mean, prec) = gaussian_product(prior_mean, prior_prec, &mean_obs, &combined);
    (mean, prec, combined)
}

/// Per-class Gaussian implied by completing the square over `ξ_i + ζ_i + β_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedGaussian {
    /// Diagonal of `Ŝ`.
    pub cov: Vec<f64>,
    pub mean: Vec<f64>,
    pub bias: f64,
}

impl FusedGaussian {
    /// `−½ (z−μ̂)ᵀ Ŝ⁻¹ (z−μ̂) + b̂`
    pub fn score(&self, z: &[f64]) -> f64 {
        let q: f64 = z
            .iter()
            .zip(&self.mean)
            .zip(&self.cov)
            .map(|((z, m), s)| (z - m) * (z - m) / s)
            .sum();
        -0.5 * q + self.bias
    }
}

/// With `P = A_g A*_i`, `Q = (2λ/d) A_c` and `m = μ*_i + μ_i`:
/// `Ŝ = (P+Q)⁻¹`, `μ̂ = Ŝ (P m + Q υ_i)` and
/// `b̂ = β_i + ½ μ̂ᵀ Ŝ⁻¹ μ̂ − ½ (mᵀPm + υ_iᵀQυ_i)`, so the score equals the
/// fused logit exactly. Masked classes use `Q = 0`.
pub fn fused_params(ctx: &PersonalContext, head: &FusionHead) -> Vec<FusedGaussian> {
    let d = ctx.dim();
    let q_scale = 2.0 * ctx.lambda / d as f64;
    (0..ctx.num_classes())
        .map(|i| {
            let a = ctx.bank.precisions[i].diag();
            let p: Vec<f64> = head.gain_global.iter().zip(a).map(|(g, a)| g * a).collect();
            let m: Vec<f64> = ctx.nav.means[i]
                .iter()
                .zip(&head.mean_offsets[i])
                .map(|(a, b)| a + b)
                .collect();
            let u = &ctx.prototypes.means[i];
            let q: Vec<f64> = if ctx.prototypes.present[i] {
                head.gain_local.iter().map(|c| q_scale * c).collect()
            } else {
                vec![0.0; d]
            };
            let (mean, prec) = gaussian_product(&m, &p, u, &q);
            let mut quad = 0.0;
            for j in 0..d {
                quad += prec[j] * mean[j] * mean[j] - p[j] * m[j] * m[j] - q[j] * u[j] * u[j];
            }
            FusedGaussian {
                cov: prec.iter().map(|v| 1.0 / v).collect(),
                mean,
                bias: ctx.nav.biases[i] + head.bias_offsets[i] + 0.5 * quad,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResult {
    pub client_id: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Frozen global classifier (no adaptation).
    pub acc_global: Option<f64>,
    /// Fitted head before bias refinement.
    pub acc_fusion: Option<f64>,
    /// Final personalized head.
    pub acc_personalized: Option<f64>,
    pub train_loss_init: f64,
    pub train_loss_before_lbfgs: f64,
    pub train_loss_after_lbfgs: f64,
}

#[derive(Debug, Clone)]
pub struct Phase2Output {
    pub results: Vec<ClientResult>,
    pub heads: Vec<FusionHead>,
    pub contexts: Vec<PersonalContext>,
}

fn head_accuracy(
    z: &[Vec<f64>],
    y: &[usize],
    ctx: &PersonalContext,
    head: &FusionHead,
) -> Option<f64> {
    (!y.is_empty()).then(|| {
        let pred: Vec<usize> = z.iter().map(|z| predict(z, ctx, head).0).collect();
        accuracy(&pred, y)
    })
}

/// Personalizes and evaluates one client.
pub fn personalize_client(
    client: &ClientDataset,
    state: &ServerState,
    lambda: f64,
    cfg: &PersonalizeConfig,
    seed: u64,
) -> Result<(ClientResult, FusionHead, PersonalContext), ModelError> {
    let ctx = build_context(client, state, lambda)?;
    let mut rng = RngStream::new(seed).derive(&[TAG_PHASE2, client.client_id as u64]);
    let init = FusionHead::init(ctx.num_classes(), ctx.dim());
    let loss_init = train_loss(&ctx, &init);
    let fitted = fit_personalized_head(&ctx, cfg, &mut rng);
    let loss_fit = train_loss(&ctx, &fitted);
    if loss_fit > loss_init {
        log::warn!(
            "client {}: head fitting raised train loss {loss_init} -> {loss_fit}",
            client.client_id
        );
    }
    let (head, loss_after) = if cfg.refine_bias {
        let (h, r) = lbfgs_refine_bias(&ctx, &fitted, cfg);
        (h, r.loss_after)
    } else {
        (fitted.clone(), loss_fit)
    };
    let zt = state.gen.embed(&client.test_features())?;
    let yt = client.test_labels();
    let result = ClientResult {
        client_id: client.client_id,
        n_train: client.n_train(),
        n_test: client.n_test(),
        acc_global: (!yt.is_empty()).then(|| {
            let pred: Vec<usize> = zt
                .iter()
                .map(|z| argmax(&gaussian_logits(z, &state.nav, &state.bank)))
                .collect();
            accuracy(&pred, &yt)
        }),
        acc_fusion: head_accuracy(&zt, &yt, &ctx, &fitted),
        acc_personalized: head_accuracy(&zt, &yt, &ctx, &head),
        train_loss_init: loss_init,
        train_loss_before_lbfgs: loss_fit,
        train_loss_after_lbfgs: loss_after,
    };
    if yt.is_empty() {
        log::warn!(
            "client {} has no test samples; excluded from summaries",
            client.client_id
        );
    }
    Ok((result, head, ctx))
}

/// Phase 2 for every client, independently and in parallel.
pub fn run_phase2(
    clients: &[ClientDataset],
    state: &ServerState,
    lambda: f64,
    cfg: &PersonalizeConfig,
    seed: u64,
) -> Result<Phase2Output, ModelError> {
    let per: Vec<_> = clients
        .par_iter()
        .map(|c| personalize_client(c, state, lambda, cfg, seed))
        .collect::<Result<_, _>>()?;
    let mut out = Phase2Output {
        results: Vec::with_capacity(per.len()),
        heads: Vec::with_capacity(per.len()),
        contexts: Vec::with_capacity(per.len()),
    };
    for (r, h, c) in per {
        out.results.push(r);
        out.heads.push(h);
        out.contexts.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_covariance_bank;

    fn ctx2(lambda: f64) -> PersonalContext {
        let nav = Navigator {
            means: vec![vec![1.0, 0.0], vec![-1.0, 0.5]],
            biases: vec![0.2, -0.1],
        };
        let mut bank = init_covariance_bank(2, 2);
        bank.precisions[1] = crate::numcore::DiagMat::new(vec![2.0, 0.5]).unwrap();
        let z = vec![vec![0.9, 0.1], vec![1.2, -0.3], vec![-0.8, 0.4]];
        PersonalContext::from_representations(0, z, vec![0, 0, 1], nav, bank, lambda)
    }

    #[test]
    fn init_head_without_local_term_is_global_classifier() {
        let ctx = ctx2(0.0);
        let head = FusionHead::init(2, 2);
        for z in &ctx.z {
            assert_eq!(
                fusion_logits(z, &ctx, &head),
                gaussian_logits(z, &ctx.nav, &ctx.bank)
            );
        }
    }

    #[test]
    fn logit_at_fused_center_is_bias() {
        let mut ctx = ctx2(1.0);
        let head = FusionHead::init(2, 2);
        ctx.prototypes.means[1] = ctx.nav.means[1].clone();
        let z = ctx.nav.means[1].clone();
        let l = fusion_logits(&z, &ctx, &head);
        assert_eq!(l[1], ctx.nav.biases[1]);
    }

    #[test]
    fn single_class_loss_is_zero() {
        let nav = Navigator {
            means: vec![vec![0.3]],
            biases: vec![0.0],
        };
        let ctx = PersonalContext::from_representations(
            0,
            vec![vec![1.0], vec![2.0]],
            vec![0, 0],
            nav,
            init_covariance_bank(1, 1),
            1.0,
        );
        let g = fusion_loss_and_grads(&ctx.z, &ctx.y, &ctx, &FusionHead::init(1, 1));
        assert_eq!(g.loss, 0.0);
        assert!(g.head.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn masked_class_has_no_local_term() {
        let nav = Navigator {
            means: vec![vec![0.0], vec![1.0]],
            biases: vec![0.0, 0.0],
        };
        let ctx = PersonalContext::from_representations(
            0,
            vec![vec![0.2]],
            vec![0],
            nav.clone(),
            init_covariance_bank(2, 1),
            1.0,
        );
        assert!(!ctx.prototypes.present[1]);
        let l = fusion_logits(&[3.0], &ctx, &FusionHead::init(2, 1));
        assert_eq!(l[1], -0.5 * 4.0);
        let fused = fused_params(&ctx, &FusionHead::init(2, 1));
        assert_eq!(fused[1].cov, vec![1.0]);
        assert_eq!(fused[1].mean, vec![1.0]);
        assert_eq!(fused[1].bias, 0.0);
    }

    #[test]
    fn zero_epochs_or_zero_lr_leave_head_at_init() {
        let ctx = ctx2(1.0);
        let init = FusionHead::init(2, 2);
        let cfg = PersonalizeConfig {
            epochs: 0,
            ..PersonalizeConfig::default()
        };
        assert_eq!(
            fit_personalized_head(&ctx, &cfg, &mut RngStream::new(0)),
            init
        );
        let cfg = PersonalizeConfig {
            lr: 0.0,
            ..PersonalizeConfig::default()
        };
        assert_eq!(
            fit_personalized_head(&ctx, &cfg, &mut RngStream::new(0)),
            init
        );
    }

    #[test]
    fn prior_only_limit() {
        let ctx = ctx2(1.0);
        let mut head = FusionHead::init(2, 2);
        head.gain_local = vec![0.0; 2];
        head.mean_offsets[0] = vec![0.5, -0.5];
        let f = fused_params(&ctx, &head);
        assert_eq!(f[0].cov, vec![1.0, 1.0]);
        assert_eq!(f[0].mean, vec![1.5, -0.5]);
        assert_eq!(f[1].cov, vec![0.5, 2.0]);
    }

    #[test]
    fn equal_precision_gives_midpoint() {
        // d = 2, λ = 1: (2λ/d)·A_c = A_c, so A_g A* = A_c = I is the equal case.
        let ctx = ctx2(1.0);
        let head = FusionHead::init(2, 2);
        let f = fused_params(&ctx, &head);
        let u = &ctx.prototypes.means[0];
        for j in 0..2 {
            let mid = 0.5 * (ctx.nav.means[0][j] + u[j]);
            assert!((f[0].mean[j] - mid).abs() < 1e-15);
        }
    }

    #[test]
    fn k1_predicts_class_zero() {
        let nav = Navigator {
            means: vec![vec![0.0]],
            biases: vec![0.0],
        };
        let ctx = PersonalContext::from_representations(
            0,
            vec![vec![1.0]],
            vec![0],
            nav,
            init_covariance_bank(1, 1),
            1.0,
        );
        assert_eq!(
            predict(&[5.0], &ctx, &FusionHead::init(1, 1)),
            (0, vec![1.0])
        );
    }

    #[test]
    fn optimal_biases_are_unchanged() {
        let nav = Navigator {
            means: vec![vec![0.0], vec![0.0]],
            biases: vec![0.0, 0.0],
        };
        // Balanced, symmetric: equal biases are optimal.
        let ctx = PersonalContext::from_representations(
            0,
            vec![vec![0.0]; 4],
            vec![0, 1, 0, 1],
            nav,
            init_covariance_bank(2, 1),
            0.0,
        );
        let head = FusionHead::init(2, 1);
        let (out, rep) = lbfgs_refine_bias(&ctx, &head, &PersonalizeConfig::default());
        assert_eq!(out, head);
        assert_eq!(rep.iterations, 0);
    }
}
