//! Experiment driver: configuration, end-to-end runs of every method, summary
//! statistics and output artifacts.
//!
//! A run writes `<output_dir>/<method>-<seed>/` containing `manifest.json`,
//! `rounds.csv`, `clients.csv`, `summary.json`, `checkpoint.json` (when a
//! global model exists) and optionally `reps.csv`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{ClientDataset, DataError, DataSource, SyntheticScenario};
use crate::fedsim::baselines::{dense_predict, init_dense};
use crate::fedsim::metrics::write_csv;
use crate::fedsim::{
    accuracy, run_fedavg, run_fedavgft, run_local, run_phase1, FedError, Method, ModelConfig,
    RoundMetrics, ServerState, TrainConfig, TAG_INIT,
};
use crate::model::{Checkpoint, ModelError, SeedLineage};
use crate::numcore::{mean_std, RngStream};
use crate::personalize::{run_phase2, PersonalizeConfig};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn config_err(path: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Config {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelConfig,
    /// `train.seed` is the master seed of the run.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub personalize: PersonalizeConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_true")]
    pub write_checkpoint: bool,
    /// Dump test-split representations for external visualization.
    #[serde(default)]
    pub dump_reps: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// The bundled desk-scale scenario.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticScenario::desk_default(seed)),
            model: ModelConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            personalize: PersonalizeConfig::default(),
            output_dir: default_output_dir(),
            write_checkpoint: true,
            dump_reps: false,
        }
    }

    /// Parses JSON, reporting the path of the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|source| ExperimentError::Io {
            path: p.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Master seed for training and data sampling.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        match &mut self.data {
            DataSource::Synthetic(s) => s.seed = seed,
            DataSource::Idx(s) => s.seed = seed,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let t = &self.train;
        if !(t.participation > 0.0 && t.participation <= 1.0) {
            return Err(config_err(
                "train.participation",
                format!("must lie in (0, 1], got {}", t.participation),
            ));
        }
        if t.batch_size == 0 {
            return Err(config_err("train.batch_size", "must be positive"));
        }
        if let Err(e) = t.validate() {
            return Err(config_err("train", e.to_string()));
        }
        if self.model.rep_dim == 0 || self.model.hidden.contains(&0) {
            return Err(config_err("model", "layer widths must be positive"));
        }
        let p = &self.personalize;
        if p.batch_size == 0 {
            return Err(config_err("personalize.batch_size", "must be positive"));
        }
        if !(p.lr >= 0.0 && p.lr.is_finite()) {
            return Err(config_err(
                "personalize.lr",
                format!("must be finite and non-negative, got {}", p.lr),
            ));
        }
        if p.lbfgs.memory == 0
            || !(p.lbfgs.step > 0.0)
            || !(p.lbfgs.backtrack > 0.0 && p.lbfgs.backtrack < 1.0)
        {
            return Err(config_err(
                "personalize.lbfgs",
                "memory > 0, step > 0 and backtrack in (0, 1) required",
            ));
        }
        match &self.data {
            DataSource::Synthetic(s) => s.validate().map_err(|e| config_err("data", e.to_string())),
            DataSource::Idx(s) if s.num_clients == 0 => {
                Err(config_err("data.num_clients", "must be positive"))
            }
            DataSource::Idx(s) if !(s.dirichlet_alpha > 0.0) => Err(config_err(
                "data.dirichlet_alpha",
                format!("must be positive, got {}", s.dirichlet_alpha),
            )),
            DataSource::Idx(_) => Ok(()),
        }
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}", self.train.method, self.train.seed)
    }
}

/// One row of `clients.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRow {
    pub client_id: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub acc_global: Option<f64>,
    pub acc_personalized: Option<f64>,
    pub train_loss_before_lbfgs: Option<f64>,
    pub train_loss_after_lbfgs: Option<f64>,
    /// Fitted fusion head before bias refinement.
    pub acc_fusion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    /// Final per-client test accuracy, clients without test data omitted.
    pub per_client: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Mean accuracy of the global model (no adaptation).
    pub global_mean: Option<f64>,
    /// Mean accuracy of the fitted fusion head before bias refinement.
    pub fusion_mean: Option<f64>,
    pub first_round_loss: Option<f64>,
    pub final_round_loss: Option<f64>,
    pub phase_ms: BTreeMap<String, u64>,
    pub output_dir: PathBuf,
}

/// Arithmetic mean and population standard deviation.
///
/// # Panics
/// If `values` is empty.
pub fn summarize(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty(), "summarize needs at least one value");
    mean_std(values)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    run_id: String,
    version: &'static str,
    config: &'a ExperimentConfig,
    seed_lineage: &'a SeedLineage,
    num_clients: usize,
    num_classes: usize,
    input_dim: usize,
}

fn seed_lineage(cfg: &ExperimentConfig) -> SeedLineage {
    let data = match &cfg.data {
        DataSource::Synthetic(s) => s.seed,
        DataSource::Idx(s) => s.seed,
    };
    SeedLineage::from([
        ("master".to_string(), cfg.train.seed),
        ("data".to_string(), data),
    ])
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| mean_std(&v).0)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_reps(path: &Path, rows: &[(usize, usize, Vec<f64>)]) -> Result<(), ExperimentError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for (client, label, z) in rows {
        write!(w, "{client},{label}").map_err(io_err(path))?;
        for v in z {
            write!(w, ",{v}").map_err(io_err(path))?;
        }
        writeln!(w).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Generates data, trains, personalizes, evaluates and writes every artifact.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultSummary, ExperimentError> {
    cfg.validate()?;
    let mut phase_ms = BTreeMap::new();
    let t0 = Instant::now();
    let clients = cfg.data.build()?;
    phase_ms.insert("data".to_string(), t0.elapsed().as_millis() as u64);
    let num_classes = clients.iter().map(|c| c.num_classes).max().unwrap_or(0);
    let input_dim = clients.first().map_or(0, ClientDataset::input_dim);
    if clients.is_empty() || num_classes == 0 || input_dim == 0 {
        return Err(FedError::NoClients.into());
    }
    let train = &cfg.train;
    let mut init_rng = RngStream::new(train.seed).derive(&[TAG_INIT]);
    let lineage = seed_lineage(cfg);

    let mut rows = Vec::with_capacity(clients.len());
    let metrics: Vec<RoundMetrics>;
    let checkpoint: Option<Checkpoint>;
    let mut reps = Vec::new();
    match train.method {
        Method::Pfedgm => {
            let init = ServerState::init(&cfg.model, input_dim, num_classes, &mut init_rng)?;
            let t = Instant::now();
            let p1 = run_phase1(train, &clients, init)?;
            phase_ms.insert("phase1".to_string(), t.elapsed().as_millis() as u64);
            let t = Instant::now();
            let p2 = run_phase2(
                &clients,
                &p1.state,
                train.lambda,
                &cfg.personalize,
                train.seed,
            )?;
            phase_ms.insert("phase2".to_string(), t.elapsed().as_millis() as u64);
            for r in &p2.results {
                rows.push(ClientRow {
                    client_id: r.client_id,
                    n_train: r.n_train,
                    n_test: r.n_test,
                    acc_global: r.acc_global,
                    acc_personalized: r.acc_personalized,
                    train_loss_before_lbfgs: Some(r.train_loss_before_lbfgs),
                    train_loss_after_lbfgs: Some(r.train_loss_after_lbfgs),
                    acc_fusion: r.acc_fusion,
                });
            }
            if cfg.dump_reps {
                for c in &clients {
                    let z = p1.state.gen.embed(&c.test_features())?;
                    reps.extend(
                        c.test_labels()
                            .into_iter()
                            .zip(z)
                            .map(|(y, z)| (c.client_id, y, z)),
                    );
                }
            }
            metrics = p1.metrics;
            checkpoint = Some(Checkpoint::new(
                p1.state.gen,
                Some(p1.state.nav),
                Some(p1.state.bank),
                num_classes,
                lineage.clone(),
            ));
        }
        Method::Fedavg | Method::Fedavgft | Method::Local => {
            let init = init_dense(&cfg.model, input_dim, num_classes, &mut init_rng)?;
            let t = Instant::now();
            let out = match train.method {
                Method::Fedavg => run_fedavg(train, &clients, init)?,
                Method::Fedavgft => run_fedavgft(train, &clients, init)?,
                _ => run_local(train, &clients, init)?,
            };
            phase_ms.insert("phase1".to_string(), t.elapsed().as_millis() as u64);
            for (i, c) in clients.iter().enumerate() {
                let yt = c.test_labels();
                let xt = c.test_features();
                let eval = |m| -> Result<Option<f64>, ModelError> {
                    (!yt.is_empty())
                        .then(|| dense_predict(m, &xt).map(|p| accuracy(&p, &yt)))
                        .transpose()
                };
                rows.push(ClientRow {
                    client_id: c.client_id,
                    n_train: c.n_train(),
                    n_test: c.n_test(),
                    acc_global: out.global.as_ref().map(eval).transpose()?.flatten(),
                    acc_personalized: eval(out.model_for(i))?,
                    train_loss_before_lbfgs: None,
                    train_loss_after_lbfgs: None,
                    acc_fusion: None,
                });
                if cfg.dump_reps {
                    // Penultimate-layer activations of the evaluated model.
                    let mut body = out.model_for(i).clone();
                    body.layers.pop();
                    let z = body.embed(&xt)?;
                    reps.extend(yt.iter().zip(z).map(|(&y, z)| (c.client_id, y, z)));
                }
            }
            metrics = out.metrics;
            checkpoint = out
                .global
                .map(|g| Checkpoint::new(g, None, None, num_classes, lineage.clone()));
        }
    }

    let per_client: Vec<f64> = rows.iter().filter_map(|r| r.acc_personalized).collect();
    let (mean, std) = if per_client.is_empty() {
        (0.0, 0.0)
    } else {
        summarize(&per_client)
    };
    let dir = cfg.output_dir.join(cfg.run_id());
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let manifest = Manifest {
        run_id: cfg.run_id(),
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        seed_lineage: &lineage,
        num_clients: clients.len(),
        num_classes,
        input_dim,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    write_csv(dir.join("rounds.csv"), &metrics)?;
    write_csv(dir.join("clients.csv"), &rows)?;
    if let (true, Some(ck)) = (cfg.write_checkpoint, &checkpoint) {
        ck.write(dir.join("checkpoint.json"))?;
    }
    if cfg.dump_reps {
        write_reps(&dir.join("reps.csv"), &reps)?;
    }
    phase_ms.insert("total".to_string(), t0.elapsed().as_millis() as u64);
    let summary = ResultSummary {
        run_id: cfg.run_id(),
        method: train.method,
        seed: train.seed,
        per_client,
        mean,
        std,
        global_mean: mean_of(rows.iter().map(|r| r.acc_global)),
        fusion_mean: mean_of(rows.iter().map(|r| r.acc_fusion)),
        first_round_loss: metrics.first().map(|m| m.mean_train_loss),
        final_round_loss: metrics.last().map(|m| m.mean_train_loss),
        phase_ms,
        output_dir: dir.clone(),
    };
    let path = dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(io_err(&path))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summarize_small_cases() {
        assert_eq!(summarize(&[0.5]), (0.5, 0.0));
        assert_eq!(summarize(&[0.0, 1.0]), (0.5, 0.5));
    }

    #[test]
    fn summarize_uniform_moments() {
        let mut rng = RngStream::new(11);
        let v: Vec<f64> = (0..1000).map(|_| rng.uniform()).collect();
        let (m, s) = summarize(&v);
        assert!((m - 0.5).abs() < 0.03);
        assert!((s - (1.0f64 / 12.0).sqrt()).abs() < 0.03);
    }

    #[test]
    fn config_errors_carry_field_paths() {
        let mut v = serde_json::to_value(ExperimentConfig::desk_default(0)).unwrap();
        v["train"]["participation"] = serde_json::json!("high");
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("train.participation"), "{err}");

        let mut cfg = ExperimentConfig::desk_default(0);
        cfg.train.participation = 1.5;
        let err = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap_err();
        assert!(err.to_string().contains("train.participation"), "{err}");
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = ExperimentConfig::desk_default(4);
        let text = format!(
            r#"{{"data": {}}}"#,
            serde_json::to_string(&cfg.data).unwrap()
        );
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back.train.rounds, TrainConfig::default().rounds);
        assert_eq!(back.personalize, PersonalizeConfig::default());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExperimentConfig::desk_default(9);
        let back =
            ExperimentConfig::from_json(&serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
