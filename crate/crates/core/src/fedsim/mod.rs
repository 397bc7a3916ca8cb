//! Phase-1 orchestration: client sampling, local training on the composite
//! objective, and weighted server aggregation of generator, navigator and
//! covariance bank. Baselines live in [`baselines`].

pub mod baselines;
pub mod metrics;

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::ClientDataset;
use crate::model::{
    init_covariance_bank, init_generator, init_navigator, CovarianceBank, GeneratorParams,
    ModelError, Navigator, ParamTensors, Sgd, SgdState,
};
use crate::numcore::{argmax, RngStream};
use crate::objectives::{
    compute_prototypes_exact, covariance_loss_and_grad, gaussian_logits, personal_loss_and_grad,
    shared_loss_and_grads, LossBreakdown, DEFAULT_EMA_RATE,
};

pub use baselines::{run_fedavg, run_fedavgft, run_local, DenseOutput};
pub use metrics::RoundMetrics;

pub(crate) const TAG_SELECT: u64 = 0x5E1EC7;
pub(crate) const TAG_LOCAL: u64 = 0x10CA1;
pub(crate) const TAG_INIT: u64 = 0x1417;

#[derive(Debug, thiserror::Error)]
pub enum FedError {
    #[error("client {0} has an empty train split")]
    EmptyTrainSplit(usize),
    #[error("round {0}: no client finished local training")]
    NoSuccessfulClients(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no clients registered")]
    NoClients,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pfedgm,
    Fedavg,
    Fedavgft,
    Local,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pfedgm => "pfedgm",
            Method::Fedavg => "fedavg",
            Method::Fedavgft => "fedavgft",
            Method::Local => "local",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pfedgm" => Ok(Method::Pfedgm),
            "fedavg" => Ok(Method::Fedavg),
            "fedavgft" => Ok(Method::Fedavgft),
            "local" => Ok(Method::Local),
            _ => Err(format!(
                "unknown method `{s}` (expected pfedgm, fedavg, fedavgft or local)"
            )),
        }
    }
}

/// Network sizes: `input -> hidden... -> rep_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub rep_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            rep_dim: 8,
        }
    }
}

impl ModelConfig {
    pub fn generator_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.rep_dim);
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub participation: f64,
    pub ema_rate: f64,
    /// Whole-model fine-tuning after FedAvg.
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub method: Method,
    pub seed: u64,
    /// Evaluate the global model on every client's test split each round.
    pub eval_global: bool,
    /// Record wall-clock time in the metrics; off keeps output reproducible.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 60,
            local_epochs: 5,
            batch_size: 50,
            lr: 0.01,
            momentum: 0.5,
            weight_decay: 5e-4,
            lambda: 1.0,
            participation: 0.3,
            ema_rate: DEFAULT_EMA_RATE,
            finetune_epochs: 5,
            finetune_lr: 0.05,
            method: Method::Pfedgm,
            seed: 0,
            eval_global: true,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: String| Err(FedError::InvalidConfig(m));
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!(
                "participation must lie in (0, 1], got {}",
                self.participation
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return bad(format!(
                "ema_rate must lie in [0, 1], got {}",
                self.ema_rate
            ));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
            ("finetune_lr", self.finetune_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn sgd(&self) -> Sgd {
        Sgd {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub gen: GeneratorParams,
    pub nav: Navigator,
    pub bank: CovarianceBank,
    pub round: usize,
}

impl ServerState {
    pub fn init(
        model: &ModelConfig,
        input_dim: usize,
        num_classes: usize,
        rng: &mut RngStream,
    ) -> Result<Self, ModelError> {
        let gen = init_generator(&model.generator_dims(input_dim), rng)?;
        let nav = init_navigator(num_classes, model.rep_dim, rng);
        Ok(Self {
            gen,
            nav,
            bank: init_covariance_bank(num_classes, model.rep_dim),
            round: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.nav.num_classes()
    }

    /// Global classifier prediction for each input.
    pub fn predict<X: AsRef<[f64]>>(&self, features: &[X]) -> Result<Vec<usize>, ModelError> {
        Ok(self
            .gen
            .embed(features)?
            .iter()
            .map(|z| argmax(&gaussian_logits(z, &self.nav, &self.bank)))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub gen: GeneratorParams,
    pub nav: Navigator,
    pub bank: CovarianceBank,
    pub n_train: usize,
    /// One entry per mini-batch step.
    pub losses: Vec<LossBreakdown>,
    /// Samples seen without a prototype for their class.
    pub missing_prototypes: usize,
}

impl ClientUpdate {
    pub fn mean_loss(&self) -> LossBreakdown {
        let n = self.losses.len().max(1) as f64;
        let lambda = self.losses.first().map_or(0.0, |l| l.lambda);
        let h = self.losses.iter().map(|l| l.h).sum::<f64>() / n;
        let r = self.losses.iter().map(|l| l.r).sum::<f64>() / n;
        LossBreakdown {
            h,
            r,
            lambda,
            total: self.losses.iter().map(|l| l.total).sum::<f64>() / n,
        }
    }
}

/// Sorted ids of a uniform sample without replacement of
/// `max(1, round(q·M))` clients out of `0..m`.
pub fn select_clients(m: usize, q: f64, rng: &mut RngStream) -> Vec<usize> {
    if m == 0 {
        return Vec::new();
    }
    let size = ((q * m as f64).round() as usize).clamp(1, m);
    let mut ids = rand::seq::index::sample(rng, m, size).into_vec();
    ids.sort_unstable();
    ids
}

/// Local training of one client starting from the server snapshot.
pub fn local_train(
    client: &ClientDataset,
    globals: &ServerState,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<ClientUpdate, FedError> {
    let n = client.n_train();
    if n == 0 {
        return Err(FedError::EmptyTrainSplit(client.client_id));
    }
    let mut gen = globals.gen.clone();
    let mut nav = globals.nav.clone();
    let mut bank = globals.bank.clone();
    let k = nav.num_classes();
    let d = gen.output_dim();
    let feats = client.train_features();
    let labels = client.train_labels();
    let mut protos = compute_prototypes_exact(&feats, &labels, &gen, k, cfg.ema_rate)?;

    let sgd = cfg.sgd();
    let (mut gs, mut ns, mut bs) = (
        SgdState::default(),
        SgdState::default(),
        SgdState::default(),
    );
    let mut losses = Vec::new();
    let mut missing = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb: Vec<&[f64]> = chunk.iter().map(|&i| feats[i]).collect();
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (z, tape) = gen.forward(&xb)?;
            let shared = shared_loss_and_grads(&z, &yb, &nav);
            let personal = personal_loss_and_grad(&z, &yb, &protos, d);
            let cov = covariance_loss_and_grad(&z, &yb, &nav, &bank);
            missing += personal.missing;
            let dz: Vec<Vec<f64>> = shared
                .dz
                .iter()
                .zip(&personal.dz)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + cfg.lambda * y).collect())
                .collect();
            let (ggrads, _) = gen.backward(&tape, &dz)?;
            sgd.step(&mut gen, &ggrads.tensors(), &mut gs);
            sgd.step(&mut nav, &shared.navigator_tensors(), &mut ns);
            sgd.step(&mut bank, &cov.tensors(), &mut bs);
            protos.update(&z, &yb);
            losses.push(LossBreakdown::new(shared.loss, personal.loss, cfg.lambda));
        }
    }
    Ok(ClientUpdate {
        client_id: client.client_id,
        gen,
        nav,
        bank,
        n_train: n,
        losses,
        missing_prototypes: missing,
    })
}

/// `n_i / Σ n_j`.
pub fn aggregation_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// `Σ w_i · p_i` tensor by tensor, accumulated in the order given.
pub fn weighted_average<P: ParamTensors + Clone>(items: &[(&P, f64)]) -> P {
    let mut out = items[0].0.clone();
    for t in out.tensors_mut() {
        t.fill(0.0);
    }
    for (p, w) in items {
        for (o, t) in out.tensors_mut().into_iter().zip(p.tensors()) {
            for (a, b) in o.iter_mut().zip(t) {
                *a += w * b;
            }
        }
    }
    out.project();
    out
}

/// Weighted server average of client updates. Updates are ordered by client
/// id first so the result does not depend on the order they arrived in.
///
/// # Panics
/// If `updates` is empty.
pub fn aggregate(updates: &[ClientUpdate]) -> (GeneratorParams, Navigator, CovarianceBank) {
    assert!(!updates.is_empty(), "aggregate needs at least one update");
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let w = aggregation_weights(&sorted.iter().map(|u| u.n_train).collect::<Vec<_>>());
    let gen = weighted_average(
        &sorted
            .iter()
            .zip(&w)
            .map(|(u, &w)| (&u.gen, w))
            .collect::<Vec<_>>(),
    );
    let nav = weighted_average(
        &sorted
            .iter()
            .zip(&w)
            .map(|(u, &w)| (&u.nav, w))
            .collect::<Vec<_>>(),
    );
    let bank = weighted_average(
        &sorted
            .iter()
            .zip(&w)
            .map(|(u, &w)| (&u.bank, w))
            .collect::<Vec<_>>(),
    );
    (gen, nav, bank)
}

/// Mean over clients with a non-empty test split of per-client accuracy.
pub fn mean_client_accuracy<F>(
    clients: &[ClientDataset],
    mut predict: F,
) -> Result<Option<f64>, ModelError>
where
    F: FnMut(&ClientDataset, &[&[f64]]) -> Result<Vec<usize>, ModelError>,
{
    let mut accs = Vec::new();
    for c in clients.iter().filter(|c| c.n_test() > 0) {
        let pred = predict(c, &c.test_features())?;
        accs.push(accuracy(&pred, &c.test_labels()));
    }
    Ok((!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64))
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

#[derive(Debug, Clone)]
pub struct Phase1Output {
    pub state: ServerState,
    pub metrics: Vec<RoundMetrics>,
}

/// Phase 1 with uniform client sampling.
pub fn run_phase1(
    cfg: &TrainConfig,
    clients: &[ClientDataset],
    init: ServerState,
) -> Result<Phase1Output, FedError> {
    let root = RngStream::new(cfg.seed);
    run_phase1_with(cfg, clients, init, |round| {
        select_clients(
            clients.len(),
            cfg.participation,
            &mut root.derive(&[TAG_SELECT, round as u64]),
        )
    })
}

/// Phase 1 with an explicit schedule returning, per round, indices into
/// `clients`. Each client's stream depends only on the master seed, its
/// `client_id` and the round.
pub fn run_phase1_with<S>(
    cfg: &TrainConfig,
    clients: &[ClientDataset],
    init: ServerState,
    mut schedule: S,
) -> Result<Phase1Output, FedError>
where
    S: FnMut(usize) -> Vec<usize>,
{
    cfg.validate()?;
    let root = RngStream::new(cfg.seed);
    let mut state = init;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let start = Instant::now();
        let selected = schedule(round);
        let snapshot = &state;
        let results: Vec<Result<ClientUpdate, FedError>> = selected
            .par_iter()
            .map(|&i| {
                let c = &clients[i];
                let mut rng = root.derive(&[TAG_LOCAL, c.client_id as u64, round as u64]);
                local_train(c, snapshot, cfg, &mut rng)
            })
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(u) => updates.push(u),
                Err(e) => log::warn!("round {}: skipping client: {e}", round + 1),
            }
        }
        if updates.is_empty() {
            return Err(FedError::NoSuccessfulClients(round + 1));
        }
        updates.sort_by_key(|u| u.client_id);
        let (gen, nav, bank) = aggregate(&updates);
        state = ServerState {
            gen,
            nav,
            bank,
            round: state.round + 1,
        };
        let losses: Vec<LossBreakdown> = updates.iter().map(ClientUpdate::mean_loss).collect();
        let acc = if cfg.eval_global {
            mean_client_accuracy(clients, |_, x| state.predict(x))?
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
        log::debug!(
            "round {} loss {:.4} acc {:?}",
            round + 1,
            metrics[round].mean_train_loss,
            metrics[round].global_test_acc
        );
    }
    Ok(Phase1Output { state, metrics })
}
