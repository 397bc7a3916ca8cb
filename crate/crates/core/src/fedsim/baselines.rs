//! Baselines on a dense softmax classifier `input -> hidden... -> rep_dim -> K`
//! trained with cross-entropy: Local, FedAvg and FedAvgFT.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{
    accuracy, aggregation_weights, mean_client_accuracy, select_clients, weighted_average,
    FedError, ModelConfig, RoundMetrics, TrainConfig, TAG_LOCAL, TAG_SELECT,
};
use crate::datagen::ClientDataset;
use crate::model::{
    init_mlp, Activation, GeneratorParams, ModelError, ParamTensors, Sgd, SgdState,
};
use crate::numcore::{argmax, log_sum_exp, RngStream};
use crate::objectives::LossBreakdown;

const TAG_FINETUNE: u64 = 0xF1E7;

/// Dense classifier with the same generator body as the Gaussian model and a
/// linear head whose parameter count equals the navigator's.
pub fn init_dense(
    model: &ModelConfig,
    input_dim: usize,
    num_classes: usize,
    rng: &mut RngStream,
) -> Result<GeneratorParams, ModelError> {
    let mut dims = model.generator_dims(input_dim);
    dims.push(num_classes);
    let n = dims.len() - 1;
    let acts: Vec<Activation> = (0..n)
        .map(|i| {
            if i + 2 >= n {
                Activation::Identity
            } else {
                Activation::Relu
            }
        })
        .collect();
    init_mlp(&dims, &acts, rng)
}

/// Batch-mean cross-entropy and `dL/dlogits`.
pub fn softmax_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| {
            let lse = log_sum_exp(l);
            loss += (lse - l[y]) / n;
            l.iter()
                .enumerate()
                .map(|(i, v)| ((v - lse).exp() - if i == y { 1.0 } else { 0.0 }) / n)
                .collect()
        })
        .collect();
    (loss, grads)
}

pub fn dense_predict<X: AsRef<[f64]>>(
    model: &GeneratorParams,
    features: &[X],
) -> Result<Vec<usize>, ModelError> {
    Ok(model.embed(features)?.iter().map(|l| argmax(l)).collect())
}

/// Mini-batch SGD epochs over one client's train split. Returns the trained
/// model and the per-batch losses.
pub fn dense_train(
    model: &GeneratorParams,
    client: &ClientDataset,
    epochs: usize,
    batch_size: usize,
    sgd: Sgd,
    rng: &mut RngStream,
) -> Result<(GeneratorParams, Vec<f64>), FedError> {
    let n = client.n_train();
    if n == 0 {
        return Err(FedError::EmptyTrainSplit(client.client_id));
    }
    let feats = client.train_features();
    let labels = client.train_labels();
    let mut model = model.clone();
    let mut state = SgdState::default();
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let xb: Vec<&[f64]> = chunk.iter().map(|&i| feats[i]).collect();
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (logits, tape) = model.forward(&xb)?;
            let (loss, dl) = softmax_cross_entropy(&logits, &yb);
            let (g, _) = model.backward(&tape, &dl)?;
            sgd.step(&mut model, &g.tensors(), &mut state);
            losses.push(loss);
        }
    }
    Ok((model, losses))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn loss_only(total: f64) -> LossBreakdown {
    LossBreakdown::new(total, 0.0, 0.0)
}

#[derive(Debug, Clone)]
pub struct DenseOutput {
    /// The final server model (FedAvg, FedAvgFT).
    pub global: Option<GeneratorParams>,
    /// Per-client models in `clients` order (Local, FedAvgFT).
    pub client_models: Vec<GeneratorParams>,
    pub metrics: Vec<RoundMetrics>,
}

impl DenseOutput {
    /// The model used to evaluate client `i`.
    pub fn model_for(&self, i: usize) -> &GeneratorParams {
        self.client_models
            .get(i)
            .or(self.global.as_ref())
            .expect("dense output holds a model")
    }
}

/// Federated averaging of the whole dense model.
pub fn run_fedavg(
    cfg: &TrainConfig,
    clients: &[ClientDataset],
    init: GeneratorParams,
) -> Result<DenseOutput, FedError> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(FedError::NoClients);
    }
    let root = RngStream::new(cfg.seed);
    let sgd = cfg.sgd();
    let mut global = init;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let start = Instant::now();
        let selected = select_clients(
            clients.len(),
            cfg.participation,
            &mut root.derive(&[TAG_SELECT, round as u64]),
        );
        let snapshot = &global;
        let results: Vec<_> = selected
            .par_iter()
            .map(|&i| {
                let c = &clients[i];
                let mut rng = root.derive(&[TAG_LOCAL, c.client_id as u64, round as u64]);
                dense_train(snapshot, c, cfg.local_epochs, cfg.batch_size, sgd, &mut rng)
                    .map(|(m, l)| (c.client_id, c.n_train(), m, l))
            })
            .collect();
        let mut updates = Vec::new();
        for r in results {
            match r {
                Ok(u) => updates.push(u),
                Err(e) => log::warn!("round {}: skipping client: {e}", round + 1),
            }
        }
        if updates.is_empty() {
            return Err(FedError::NoSuccessfulClients(round + 1));
        }
        updates.sort_by_key(|u| u.0);
        let w = aggregation_weights(&updates.iter().map(|u| u.1).collect::<Vec<_>>());
        global = weighted_average(
            &updates
                .iter()
                .zip(&w)
                .map(|(u, &w)| (&u.2, w))
                .collect::<Vec<_>>(),
        );
        let losses: Vec<LossBreakdown> = updates.iter().map(|u| loss_only(mean(&u.3))).collect();
        let acc = if cfg.eval_global {
            mean_client_accuracy(clients, |_, x| dense_predict(&global, x))?
        } else {
            None
        };
        metrics.push(RoundMetrics::from_losses(
            round + 1,
            cfg.method,
            &losses,
            acc,
            cfg.record_timing.then(|| start.elapsed()),
        ));
    }
    Ok(DenseOutput {
        global: Some(global),
        client_models: Vec::new(),
        metrics,
    })
}

/// Per round: mean loss and test accuracy.
type RoundTrace = Vec<(f64, Option<f64>)>;

/// Every client trains its own model for `rounds × local_epochs` epochs.
pub fn run_local(
    cfg: &TrainConfig,
    clients: &[ClientDataset],
    init: GeneratorParams,
) -> Result<DenseOutput, FedError> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(FedError::NoClients);
    }
    let root = RngStream::new(cfg.seed);
    let sgd = cfg.sgd();
    // Per client: final model and, per round, (mean loss, test accuracy).
    let traces: Vec<(GeneratorParams, RoundTrace)> = clients
        .par_iter()
        .map(|c| {
            let mut model = init.clone();
            let mut trace = Vec::with_capacity(cfg.rounds);
            for round in 0..cfg.rounds {
                let mut rng = root.derive(&[TAG_LOCAL, c.client_id as u64, round as u64]);
                let (m, losses) =
                    dense_train(&model, c, cfg.local_epochs, cfg.batch_size, sgd, &mut rng)?;
                model = m;
                let acc = if cfg.eval_global && c.n_test() > 0 {
                    Some(accuracy(
                        &dense_predict(&model, &c.test_features())?,
                        &c.test_labels(),
                    ))
                } else {
                    None
                };
                trace.push((mean(&losses), acc));
            }
            Ok((model, trace))
        })
        .collect::<Result<_, FedError>>()?;
    let metrics = (0..cfg.rounds)
        .map(|round| {
            let losses: Vec<LossBreakdown> =
                traces.iter().map(|t| loss_only(t.1[round].0)).collect();
            let accs: Vec<f64> = traces.iter().filter_map(|t| t.1[round].1).collect();
            let acc = (!accs.is_empty()).then(|| mean(&accs));
            RoundMetrics::from_losses(round + 1, cfg.method, &losses, acc, None)
        })
        .collect();
    Ok(DenseOutput {
        global: None,
        client_models: traces.into_iter().map(|t| t.0).collect(),
        metrics,
    })
}

/// FedAvg followed by per-client fine-tuning of the whole model for
/// `finetune_epochs` at `finetune_lr`.
pub fn run_fedavgft(
    cfg: &TrainConfig,
    clients: &[ClientDataset],
    init: GeneratorParams,
) -> Result<DenseOutput, FedError> {
    let mut out = run_fedavg(cfg, clients, init)?;
    let global = out.global.clone().expect("fedavg returns a global model");
    let root = RngStream::new(cfg.seed);
    let sgd = Sgd {
        lr: cfg.finetune_lr,
        ..cfg.sgd()
    };
    out.client_models = clients
        .par_iter()
        .map(|c| {
            if cfg.finetune_epochs == 0 || c.n_train() == 0 {
                return Ok(global.clone());
            }
            let mut rng = root.derive(&[TAG_FINETUNE, c.client_id as u64]);
            dense_train(
                &global,
                c,
                cfg.finetune_epochs,
                cfg.batch_size,
                sgd,
                &mut rng,
            )
            .map(|(m, _)| m)
        })
        .collect::<Result<_, FedError>>()?;
    Ok(out)
}
