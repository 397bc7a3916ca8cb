mod common;

use common::{blobs, two_blobs};
use pfedgm_core::datagen::{ClientDataset, DataSource, FeatureShift};
use pfedgm_core::experiment::{run_experiment, ExperimentConfig};
use pfedgm_core::fedsim::baselines::init_dense;
use pfedgm_core::fedsim::{
    accuracy, aggregate, local_train, run_fedavg, run_fedavgft, run_local, run_phase1,
    run_phase1_with, ClientUpdate, Method, ModelConfig, ServerState, TrainConfig,
};
use pfedgm_core::model::{init_covariance_bank, init_generator, init_navigator};
use pfedgm_core::numcore::{argmax, RngStream};
use pfedgm_core::objectives::unit_logits;

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden: vec![8],
        rep_dim: 3,
    }
}

fn init_state(model: &ModelConfig, input_dim: usize, k: usize, seed: u64) -> ServerState {
    ServerState::init(model, input_dim, k, &mut RngStream::new(seed)).unwrap()
}

fn cfg(rounds: usize) -> TrainConfig {
    TrainConfig {
        rounds,
        local_epochs: 2,
        batch_size: 10,
        lr: 0.05,
        participation: 1.0,
        ..TrainConfig::default()
    }
}

fn clients(m: usize, k: usize) -> Vec<ClientDataset> {
    (0..m)
        .map(|i| blobs(i, k, 10, 4, 0.7, 100 + i as u64))
        .collect()
}

#[test]
fn shared_objective_alone_separates_a_linear_toy() {
    let client = two_blobs(0, 50, 2, 2.0, 1);
    let mut rng = RngStream::new(2);
    let state = ServerState {
        gen: init_generator(&[2, 2], &mut rng).unwrap(),
        nav: init_navigator(2, 2, &mut rng),
        bank: init_covariance_bank(2, 2),
        round: 0,
    };
    let c = TrainConfig {
        lambda: 0.0,
        local_epochs: 30,
        lr: 0.1,
        ..cfg(1)
    };
    let u = local_train(&client, &state, &c, &mut rng).unwrap();
    let z = u.gen.embed(&client.train_features()).unwrap();
    let pred: Vec<usize> = z.iter().map(|z| argmax(&unit_logits(z, &u.nav))).collect();
    assert!(accuracy(&pred, &client.train_labels()) >= 0.95);
}

#[test]
fn zero_learning_rate_returns_globals() {
    let cs = clients(1, 3);
    let state = init_state(&small_model(), 4, 3, 3);
    let c = TrainConfig { lr: 0.0, ..cfg(1) };
    let u = local_train(&cs[0], &state, &c, &mut RngStream::new(4)).unwrap();
    assert_eq!(u.gen, state.gen);
    assert_eq!(u.nav, state.nav);
    assert_eq!(u.bank, state.bank);
}

#[test]
fn local_training_is_deterministic_and_accounts_losses() {
    let cs = clients(1, 3);
    let state = init_state(&small_model(), 4, 3, 5);
    let c = cfg(1);
    let a = local_train(&cs[0], &state, &c, &mut RngStream::new(6)).unwrap();
    let b = local_train(&cs[0], &state, &c, &mut RngStream::new(6)).unwrap();
    assert_eq!(a, b);
    assert!(!a.losses.is_empty());
    for l in &a.losses {
        assert!((l.total - (l.h + c.lambda * l.r)).abs() <= 1e-12);
    }
}

#[test]
fn aggregate_ignores_arrival_order() {
    let cs = clients(4, 3);
    let state = init_state(&small_model(), 4, 3, 7);
    let updates: Vec<ClientUpdate> = cs
        .iter()
        .map(|c| local_train(c, &state, &cfg(1), &mut RngStream::new(c.client_id as u64)).unwrap())
        .collect();
    let reference = aggregate(&updates);
    let mut rng = RngStream::new(8);
    for _ in 0..5 {
        let mut shuffled = updates.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        assert_eq!(aggregate(&shuffled), reference);
    }
    assert_eq!(
        aggregate(&updates[..1]),
        (
            updates[0].gen.clone(),
            updates[0].nav.clone(),
            updates[0].bank.clone()
        )
    );
}

#[test]
fn zero_rounds_return_initial_state() {
    let cs = clients(2, 3);
    let init = init_state(&small_model(), 4, 3, 9);
    let out = run_phase1(&cfg(0), &cs, init.clone()).unwrap();
    assert_eq!(out.state, init);
    assert!(out.metrics.is_empty());
}

#[test]
fn phase1_metrics_are_reproducible() {
    let cs = clients(3, 3);
    let run = || run_phase1(&cfg(2), &cs, init_state(&small_model(), 4, 3, 10)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.state, b.state);
}

#[test]
fn phase1_does_not_depend_on_thread_count() {
    let cs = clients(6, 3);
    let c = TrainConfig {
        participation: 0.5,
        ..cfg(3)
    };
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| run_phase1(&c, &cs, init_state(&small_model(), 4, 3, 11)).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.state, b.state);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn excluded_client_leaves_no_trace() {
    let cs = clients(4, 3);
    let without: Vec<ClientDataset> = cs[..3].to_vec();
    let c = TrainConfig {
        eval_global: false,
        ..cfg(3)
    };
    let schedule = |round: usize| {
        if round.is_multiple_of(2) {
            vec![0, 2]
        } else {
            vec![1]
        }
    };
    let a = run_phase1_with(&c, &cs, init_state(&small_model(), 4, 3, 12), schedule).unwrap();
    let b = run_phase1_with(&c, &without, init_state(&small_model(), 4, 3, 12), schedule).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn phase1_loss_decreases_on_small_scenario() {
    let cs: Vec<ClientDataset> = (0..4)
        .map(|i| blobs(i, 3, 20, 6, 1.0, 200 + i as u64))
        .collect();
    let out = run_phase1(&cfg(50), &cs, init_state(&small_model(), 6, 3, 13)).unwrap();
    let (first, last) = (
        out.metrics[0].mean_train_loss,
        out.metrics[49].mean_train_loss,
    );
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn local_with_one_client_equals_single_client_averaging() {
    let cs = clients(1, 3);
    let init = init_dense(&small_model(), 4, 3, &mut RngStream::new(14)).unwrap();
    let c = cfg(3);
    let local = run_local(&c, &cs, init.clone()).unwrap();
    let central = run_fedavg(&c, &cs, init).unwrap();
    assert_eq!(local.client_models[0], central.global.unwrap());
}

#[test]
fn finetuning_with_zero_epochs_is_fedavg() {
    let cs = clients(3, 3);
    let init = init_dense(&small_model(), 4, 3, &mut RngStream::new(15)).unwrap();
    let c = TrainConfig {
        finetune_epochs: 0,
        ..cfg(2)
    };
    let ft = run_fedavgft(&c, &cs, init.clone()).unwrap();
    let avg = run_fedavg(&c, &cs, init).unwrap();
    let global = avg.global.unwrap();
    assert_eq!(ft.global.as_ref(), Some(&global));
    for i in 0..cs.len() {
        assert_eq!(ft.model_for(i), &global);
    }
}

/// Dir(0.5) label skew with feature shift: local-only training trails
/// federated training with fine-tuning.
#[test]
fn local_trails_finetuned_fedavg_under_heterogeneity() {
    let out = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        let mut acc = Vec::new();
        for m in [Method::Local, Method::Fedavgft] {
            let mut c = ExperimentConfig::desk_default(seed);
            if let DataSource::Synthetic(s) = &mut c.data {
                s.dirichlet_alpha = 0.5;
                assert!(matches!(s.feature_shift, FeatureShift::Tau { .. }));
            }
            c.train.method = m;
            c.output_dir = out.path().to_path_buf();
            acc.push(run_experiment(&c).unwrap().mean);
        }
        assert!(
            acc[0] < acc[1],
            "seed {seed}: local {} vs fedavgft {}",
            acc[0],
            acc[1]
        );
    }
}
