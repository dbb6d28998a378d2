mod common;

use amtpp_core::checkpoint::Checkpoint;
use amtpp_core::data::{split_users, StationFeatures, UserSequence};
use amtpp_core::eval::{entropy_groups, naive_baseline, predict_steps, F1Average, MetricsReport};
use amtpp_core::synth::{generate_synthetic, SyntheticPopulationSpec};
use amtpp_core::train::{evaluate_nll, resume, train, TrainConfig};
use amtpp_core::OdMask;
use common::{micro_config, seq};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn population(users: usize) -> Vec<UserSequence> {
    let spec = SyntheticPopulationSpec { users, stations: 5, days: 10, seed: 11, ..SyntheticPopulationSpec::default() };
    generate_synthetic(&spec).unwrap().sequences
}

fn micro_train(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig { model: micro_config(), batch_size: 4, epochs, lr, seed: 5, patience: 100, ..TrainConfig::default() }
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let users = population(12);
    let (tr, va) = split_users(&users, 0.75, 1).unwrap();
    let out = train(&tr, &va, &micro_train(2, 0.0), None, None).unwrap();
    let (_, start) = amtpp_core::Amtpp::new(micro_config(), None, None, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let (_, end) = out.last.restore().unwrap();
    for (a, b) in start.iter().zip(end.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let users = population(12);
    let (tr, va) = split_users(&users, 0.75, 1).unwrap();
    let a = train(&tr, &va, &micro_train(2, 1e-2), None, None).unwrap();
    let b = train(&tr, &va, &micro_train(2, 1e-2), None, None).unwrap();
    assert_eq!(a.last.to_bytes(), b.last.to_bytes());
    let c = train(&tr, &va, &TrainConfig { seed: 6, ..micro_train(2, 1e-2) }, None, None).unwrap();
    assert_ne!(a.last.to_bytes(), c.last.to_bytes());
}

#[test]
fn validation_nll_improves_on_commuters() {
    let users = population(30);
    let (tr, va) = split_users(&users, 0.8, 2).unwrap();
    let out = train(&tr, &va, &micro_train(8, 1e-2), None, None).unwrap();
    let best = out.log.iter().map(|l| l.val.joint()).fold(f64::INFINITY, f64::min);
    assert!(best < out.initial_val.joint(), "{best} vs {}", out.initial_val.joint());
}

#[test]
fn checkpoint_bytes_survive_a_round_trip() {
    let users = population(12);
    let (tr, va) = split_users(&users, 0.75, 1).unwrap();
    let features = StationFeatures { dim: 2, values: (0..10).map(|i| i as f64 * 0.25).collect() };
    let mut mask = OdMask::diagonal(5);
    mask.forbid(1, 4).unwrap();
    let out = train(&tr, &va, &micro_train(1, 1e-2), Some(features), Some(mask)).unwrap();
    let bytes = out.last.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.amtpp");
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    // restored models predict the same thing
    let (m1, s1) = out.last.restore().unwrap();
    let (m2, s2) = Checkpoint::load(&path).unwrap().restore().unwrap();
    let p1 = m1.predict_next(&s1, &tr[0], 128, 1.0).unwrap();
    let p2 = m2.predict_next(&s2, &tr[0], 128, 1.0).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let users = population(8);
    let (tr, va) = split_users(&users, 0.75, 1).unwrap();
    let bytes = train(&tr, &va, &micro_train(1, 1e-2), None, None).unwrap().last.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let users = population(12);
    let (tr, va) = split_users(&users, 0.75, 1).unwrap();
    let full = train(&tr, &va, &micro_train(4, 1e-2), None, None).unwrap();
    let half = train(&tr, &va, &micro_train(2, 1e-2), None, None).unwrap();
    let rest = resume(&half.last, &tr, &va, 4).unwrap();
    assert_eq!(rest.last.epoch, 4);
    let vals = |log: &[amtpp_core::train::EpochLog]| log.iter().map(|l| l.val).collect::<Vec<_>>();
    assert_eq!(vals(&full.log[2..]), vals(&rest.log));
    assert_eq!(full.last.to_bytes(), rest.last.to_bytes());
}

#[test]
fn evaluation_does_not_touch_the_model() {
    let users = population(10);
    let (tr, va) = split_users(&users, 0.8, 3).unwrap();
    let out = train(&tr, &va, &micro_train(1, 1e-2), None, None).unwrap();
    let (model, store) = out.last.restore().unwrap();
    let a = predict_steps(&model, &store, &users, 128, 4).unwrap();
    let b = predict_steps(&model, &store, &users, 128, 4).unwrap();
    assert_eq!(a, b);
    let (n4, n1) = (evaluate_nll(&model, &store, &va, 128, 4).unwrap(), evaluate_nll(&model, &store, &va, 128, 1).unwrap());
    assert!((n4.joint() - n1.joint()).abs() < 1e-12 * n1.joint().abs());
    let (_, fresh) = out.last.restore().unwrap();
    assert!(store.iter().zip(fresh.iter()).all(|(x, y)| x.value == y.value));
}

#[test]
fn sliding_window_matches_batched_prefix() {
    // steps inside the window come from one batched pass, later steps from
    // separate next-trip predictions; both must agree where they overlap
    let users = population(6);
    let (tr, va) = split_users(&users, 0.5, 3).unwrap();
    let out = train(&tr, &va, &micro_train(1, 1e-2), None, None).unwrap();
    let (model, store) = out.last.restore().unwrap();
    let user = &users[0];
    let window = user.len() - 2;
    let records = predict_steps(&model, &store, std::slice::from_ref(user), window, 4).unwrap();
    for r in records.iter().filter(|r| r.step > 0 && r.step < window) {
        let p = model.predict_next(&store, &user.prefix(r.step), window, 1.0).unwrap();
        let ll_o = p.origin[r.origin].ln();
        assert!((r.ll_o.unwrap() - ll_o).abs() < 1e-9, "step {}", r.step);
    }
}

#[test]
fn entropy_groups_are_balanced() {
    for n in [5, 7, 23, 50] {
        let users = population(n);
        let groups = entropy_groups(&users).unwrap();
        assert_eq!(groups.len(), 5);
        let sizes: Vec<usize> = groups.iter().map(|g| g.1.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), n);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "{sizes:?}");
    }
    let few = population(3);
    assert_eq!(entropy_groups(&few).unwrap().len(), 1);
}

#[test]
fn naive_baseline_is_perfect_on_a_strict_commuter() {
    let h = 3600;
    let commuter = seq("c", &(0..10).map(|i| (i as i64 * 12 * h, (i % 2) * 3, 3 - (i % 2) * 3)).collect::<Vec<_>>());
    let records = naive_baseline(std::slice::from_ref(&commuter));
    let after_first: Vec<_> = records.into_iter().filter(|r| r.step > 0).collect();
    let report = MetricsReport::from_records("c", &after_first, F1Average::Weighted);
    assert_eq!(report.origin.accuracy, 1.0);
    assert_eq!(report.destination.accuracy, 1.0);
}
