use std::sync::{Arc, Mutex};

use fedasd::data::{gen_synthetic_mixture, ClientDataset, DataSource, Federation, PartitionSpec, SyntheticSpec};
use fedasd::engine::{local_train, per_class_drift, EvalMode, RunConfig, Simulation};
use fedasd::nn::{self, kl_divergence, softmax_rows, LossSpec, ModelParams};
use fedasd::regularizers::{RegularizerKind, RegularizerSpec, TeacherCache};
use fedasd::rng::{stream, Stream};

fn source() -> DataSource {
    DataSource::Synthetic(SyntheticSpec {
        num_classes: 5,
        dim: 8,
        samples_per_class: 40,
        test_samples_per_class: 20,
        spread: 2.0,
    })
}

fn config(kind: RegularizerKind, lambda: f64) -> RunConfig {
    RunConfig {
        seed: 5,
        partition: PartitionSpec {
            num_clients: 8,
            delta: 0.3,
            balanced: true,
            seed: 5,
        },
        participation_rate: 0.5,
        rounds: 4,
        local_epochs: 2,
        batch_size: 10,
        regularizer: RegularizerSpec {
            kind,
            lambda,
            ..RegularizerSpec::default()
        },
        hidden: vec![12],
        gd_every: 2,
        ..RunConfig::default()
    }
}

fn simulate(cfg: &RunConfig) -> Simulation {
    let fed = Federation::build(&source(), &cfg.partition, cfg.seed).unwrap();
    Simulation::from_federation(cfg.clone(), fed).unwrap()
}

#[test]
fn lambda_zero_matches_plain_fedavg_bitwise() {
    let mut plain = simulate(&config(RegularizerKind::None, 0.0));
    let mut asd = simulate(&config(RegularizerKind::Asd, 0.0));
    let a = plain.run().unwrap();
    let b = asd.run().unwrap();
    assert_eq!(plain.state().global, asd.state().global);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.test_acc_global.to_bits(), y.test_acc_global.to_bits());
        assert_eq!(x.ce_loss.to_bits(), y.ce_loss.to_bits());
        assert_eq!(x.sampled, y.sampled);
    }
}

#[test]
fn teacher_is_not_modified_by_local_training() {
    let cfg = config(RegularizerKind::Asd, 20.0);
    let sim = simulate(&cfg);
    let global = sim.state().global.clone();
    let before = global.checksum();
    for client in sim.clients() {
        let cache = TeacherCache::build(&global, client, cfg.regularizer.tau, 0).unwrap();
        let update = local_train(client, &global, Some(&cache), &cfg, 0, cfg.lr).unwrap();
        assert_ne!(update.params.checksum(), before);
        assert_eq!(global.checksum(), before);
    }
}

#[test]
fn single_client_full_batch_is_one_centralized_step() {
    let ds = gen_synthetic_mixture(3, 4, 10, 2.0, 9).unwrap();
    let client = ClientDataset::new(0, ds.clone()).unwrap();
    let cfg = RunConfig {
        partition: PartitionSpec {
            num_clients: 1,
            ..config(RegularizerKind::None, 0.0).partition
        },
        participation_rate: 1.0,
        rounds: 1,
        local_epochs: 1,
        batch_size: ds.len(),
        regularizer: RegularizerSpec {
            lambda: 0.0,
            ..RegularizerSpec::default()
        },
        hidden: vec![6],
        gd_every: 0,
        ..RunConfig::default()
    };
    let init = ModelParams::init(&[4, 6, 3], &mut stream(9, Stream::ModelInit, 0, 0)).unwrap();
    let mut sim = Simulation::with_initial(cfg.clone(), vec![client], ds.clone(), init.clone()).unwrap();
    sim.run().unwrap();

    let (_, grad) = nn::backward(&init, &ds.features, &ds.labels, &LossSpec::cross_entropy()).unwrap();
    let mut expected = init.clone();
    nn::sgd_step(&mut expected, &grad, cfg.lr).unwrap();
    let got = sim.state().global.to_flat();
    for (g, e) in got.iter().zip(expected.to_flat()) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn zero_rounds_evaluates_the_initial_model() {
    let mut cfg = config(RegularizerKind::Asd, 20.0);
    cfg.rounds = 0;
    let mut sim = simulate(&cfg);
    let init = sim.state().global.clone();
    assert!(sim.run().unwrap().is_empty());
    assert_eq!(sim.state().global, init);
    assert_eq!(sim.state().round, 0);
    let acc = sim.state().evaluate(sim.test(), EvalMode::Global).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn stronger_distillation_stays_closer_to_the_teacher() {
    let mean_kl = |lambda: f64| {
        let mut cfg = config(RegularizerKind::Asd, lambda);
        cfg.lr = 0.05;
        let sim = simulate(&cfg);
        let global = sim.state().global.clone();
        let client = &sim.clients()[0];
        let cache = TeacherCache::build(&global, client, cfg.regularizer.tau, 0).unwrap();
        let update = local_train(client, &global, cache_for(&cfg, &cache), &cfg, 0, cfg.lr).unwrap();
        let logits = nn::forward(&update.params, &client.data.features).unwrap();
        let student = softmax_rows(&logits, cfg.regularizer.tau).unwrap();
        let teacher = cache.probs_tau();
        (0..client.len())
            .map(|i| kl_divergence(teacher.row(i), student.row(i)).unwrap())
            .sum::<f64>()
            / client.len() as f64
    };
    let free = mean_kl(0.0);
    let mild = mean_kl(20.0);
    let pinned = mean_kl(200.0);
    assert!(
        mild < free && pinned < mild / 2.0,
        "KL λ=0 {free}, λ=20 {mild}, λ=200 {pinned}"
    );
}

fn cache_for<'a>(cfg: &RunConfig, cache: &'a TeacherCache) -> Option<&'a TeacherCache> {
    cfg.regularizer.distills().then_some(cache)
}

#[test]
fn local_training_on_one_class_does_not_help_other_classes() {
    let cfg = config(RegularizerKind::None, 0.0);
    let mut sim = simulate(&cfg);
    sim.run().unwrap();
    let global = sim.state().global.clone();
    let ds = gen_synthetic_mixture(5, 8, 40, 2.0, cfg.seed).unwrap();
    let only: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == 2).collect();
    let client = ClientDataset::new(0, ds.subset(&only)).unwrap();
    let drift = per_class_drift(&client, &global, &cfg, sim.test(), 4, cfg.lr).unwrap();
    assert!(drift.mean_absent_delta().unwrap() <= 0.0, "{:?}", drift.deltas);
    assert!(drift.deltas[2] >= 0.0);
}

#[test]
fn weights_sum_to_one_in_every_batch() {
    let mut sim = simulate(&config(RegularizerKind::Asd, 20.0));
    let sums = Arc::new(Mutex::new(Vec::new()));
    let sink = Arc::clone(&sums);
    sim.set_batch_probe(move |e| sink.lock().unwrap().push(e.weight_sum.unwrap()));
    sim.run().unwrap();
    let sums = sums.lock().unwrap();
    assert!(!sums.is_empty());
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
}

#[test]
fn all_client_average_covers_unsampled_clients() {
    let mut cfg = config(RegularizerKind::None, 0.0);
    cfg.rounds = 1;
    cfg.participation_rate = 0.25;
    let mut sim = simulate(&cfg);
    let init = sim.state().global.clone();
    let sampled = sim.run().unwrap()[0].sampled.clone();
    let params = &sim.state().client_params;
    for (k, p) in params.iter().enumerate() {
        assert_eq!(sampled.contains(&k), *p != init, "client {k}");
    }
    let avg = sim.state().model(EvalMode::AllClientAvg).unwrap();
    let mut expected = params[0].zeros_like();
    for p in params {
        expected.axpy(1.0 / params.len() as f64, p).unwrap();
    }
    for (a, e) in avg.to_flat().iter().zip(expected.to_flat()) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn dissimilarity_bound_tracks_the_largest_measurement() {
    let mut cfg = config(RegularizerKind::Asd, 20.0);
    cfg.gd_every = 1;
    let mut sim = simulate(&cfg);
    let metrics = sim.run().unwrap();
    let measured: Vec<f64> = metrics.iter().filter_map(|m| m.drift.as_ref()?.gd).collect();
    assert_eq!(measured.len(), cfg.rounds);
    let sup = measured.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(sim.dissimilarity_bound().value(), Some(sup));
    assert!(measured.iter().all(|&g| g >= 1.0 - 1e-9));
}
