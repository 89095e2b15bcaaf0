use advprune_core::bullet::BudgetPolicy;
use advprune_core::data::Dataset;
use advprune_core::diffcore::{differentiate, Tensor, Wants};
use advprune_core::losses::{LossConfig, LossKind, TrainingObjective};
use advprune_core::models::{init_model, ModelSpec};
use advprune_core::selection::{SelectorConfig, SelectorKind};
use advprune_core::trainer::{adversarial_train, selection_count, TrainConfig};
use advprune_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two well separated clusters in the unit square.
fn two_clusters(n: usize, seed: u64) -> Dataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let centre = if c == 0 { 0.3 } else { 0.7 };
        x.push((centre + r.gen_range(-0.12f32..0.12)).clamp(0.0, 1.0));
        x.push(r.gen_range(0.0f32..1.0));
        y.push(c);
    }
    Dataset::new(Tensor::new(vec![n, 2], x).unwrap(), y, 2).unwrap()
}

fn small_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(ModelSpec::mlp(2, vec![16], 2), 0.05);
    cfg.epochs = epochs;
    cfg.batch_size = 16;
    cfg.lr0 = 0.05;
    cfg.train_attack.steps = 3;
    cfg.seed = 17;
    cfg
}

fn empty() -> Dataset {
    Dataset::new(Tensor::zeros(vec![0, 2]), vec![], 2).unwrap()
}

#[test]
fn full_fraction_random_matches_full_data_training() {
    let data = two_clusters(100, 1);
    let full = small_config(6);
    let mut subset = full.clone();
    subset.selector = Some(SelectorConfig::new(SelectorKind::Random, 1.0, 0.05));
    subset.selection_interval = 2;
    let a = adversarial_train(&data, &empty(), &full).unwrap();
    let b = adversarial_train(&data, &empty(), &subset).unwrap();
    assert_eq!(b.selections.len(), 2);
    assert_eq!(a.params, b.params);
    for (ma, mb) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(ma.train_loss.to_bits(), mb.train_loss.to_bits());
        assert_eq!(ma.attack_steps, mb.attack_steps);
    }
}

#[test]
fn uniform_bullet_budget_matches_plain_training() {
    let data = two_clusters(80, 2);
    let plain = small_config(4);
    let mut bullet = plain.clone();
    bullet.bullet = Some(BudgetPolicy::uniform(plain.train_attack.steps));
    let a = adversarial_train(&data, &empty(), &plain).unwrap();
    let b = adversarial_train(&data, &empty(), &bullet).unwrap();
    assert_eq!(a.params, b.params);
    assert!(b.metrics.iter().all(|m| m.categories.unwrap().total() == 80));
}

#[test]
fn training_is_deterministic() {
    let data = two_clusters(60, 3);
    let mut cfg = small_config(4);
    cfg.selector = Some(SelectorConfig::new(SelectorKind::GradMatch, 0.5, 0.05));
    cfg.selection_interval = 2;
    let a = adversarial_train(&data, &empty(), &cfg).unwrap();
    let b = adversarial_train(&data, &empty(), &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.selections.iter().map(|s| &s.1.indices).collect::<Vec<_>>(), b.selections.iter().map(|s| &s.1.indices).collect::<Vec<_>>());
}

#[test]
fn selection_history_follows_the_schedule() {
    let data = two_clusters(40, 4);
    let val = two_clusters(10, 5);
    for (epochs, interval) in [(7, 3), (6, 6), (5, 1)] {
        let mut cfg = small_config(epochs);
        cfg.selector = Some(SelectorConfig::new(SelectorKind::Glister, 0.5, 0.05));
        cfg.selection_interval = interval;
        let out = adversarial_train(&data, &val, &cfg).unwrap();
        let epochs_seen: Vec<usize> = out.selections.iter().map(|s| s.0).collect();
        let expected: Vec<usize> = (1..epochs).filter(|e| e % interval == 0).collect();
        assert_eq!(epochs_seen, expected);
        assert_eq!(out.selections.len(), selection_count(interval, epochs));
        assert_eq!(out.initial_subset.as_ref().unwrap().len(), 20);
        for m in &out.metrics {
            assert_eq!(m.subset_size, 20);
            assert!(m.epoch_seconds > 0.0);
            assert_eq!(m.selection_seconds > 0.0, expected.contains(&m.epoch));
        }
        for (_, s) in &out.selections {
            s.validate(40).unwrap();
            assert_eq!(s.len(), 20);
        }
    }
}

#[test]
fn subset_training_spends_fewer_attack_steps() {
    let data = two_clusters(100, 6);
    let full = small_config(2);
    let mut sub = full.clone();
    sub.selector = Some(SelectorConfig::new(SelectorKind::Random, 0.3, 0.05));
    let a = adversarial_train(&data, &empty(), &full).unwrap();
    let b = adversarial_train(&data, &empty(), &sub).unwrap();
    assert_eq!(a.metrics[0].attack_steps, 100 * 3);
    assert_eq!(b.metrics[0].attack_steps, 30 * 3);
}

#[test]
fn divergence_reports_epoch_and_batch() {
    let data = two_clusters(64, 7);
    let mut cfg = small_config(3);
    cfg.lr0 = 1e30;
    cfg.momentum = 0.0;
    match adversarial_train(&data, &empty(), &cfg) {
        Err(Error::Diverged { epoch, batch, .. }) => {
            assert_eq!(epoch, 0);
            assert!(batch < 4);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_setups_are_rejected() {
    let data = two_clusters(10, 8);
    let mut cfg = small_config(1);
    cfg.batch_size = 11;
    assert!(matches!(adversarial_train(&data, &empty(), &cfg), Err(Error::InvalidConfig(_))));
    let mut cfg = small_config(1);
    cfg.selector = Some(SelectorConfig::new(SelectorKind::Glister, 0.5, 0.05));
    assert!(adversarial_train(&data, &empty(), &cfg).is_err());
    let mut cfg = small_config(1);
    cfg.momentum = 1.0;
    assert!(adversarial_train(&data, &empty(), &cfg).is_err());
    let mut cfg = small_config(1);
    cfg.epochs = 0;
    assert!(adversarial_train(&data, &empty(), &cfg).is_err());
}

#[test]
fn adversarial_training_learns_separable_data() {
    let data = two_clusters(200, 9);
    let mut cfg = small_config(15);
    cfg.eval_attacks = vec![advprune_core::attacks::AttackSpec { steps: 10, restarts: 2, ..advprune_core::attacks::AttackSpec::evaluation(0.05) }];
    let out = adversarial_train(&data, &empty(), &cfg).unwrap();
    let last = out.metrics.last().unwrap();
    assert!(last.clean_acc.unwrap() > 0.95, "{last:?}");
    assert!(last.robust_acc[0].1 > 0.85, "{last:?}");
    assert!(last.train_loss < out.metrics[0].train_loss);
}

fn loss_kind(i: u8) -> LossKind {
    match i % 3 {
        0 => LossKind::Ce,
        1 => LossKind::Trades,
        _ => LossKind::Mart,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Duplicating example j and halving both copies' weights leaves the
    /// batch loss unchanged.
    #[test]
    fn duplicate_and_halve_preserves_loss(seed in 0u64..1000, j in 0usize..5, kind in 0u8..3, w0 in 0.1f32..3.0) {
        let spec = ModelSpec::mlp(2, vec![8], 3);
        let params = init_model(&spec, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![5, 2], (0..10).map(|_| r.gen_range(0.0f32..1.0)).collect()).unwrap();
        let adv = x.map(|v| (v + 0.03).min(1.0));
        let y: Vec<usize> = (0..5).map(|_| r.gen_range(0..3)).collect();
        let mut w: Vec<f32> = (0..5).map(|_| r.gen_range(0.1f32..2.0)).collect();
        w[j] = w0;
        let cfg = LossConfig { kind: loss_kind(kind), beta: 1.0, lambda_mart: 5.0 };

        let base = TrainingObjective { config: cfg, clean: &x, labels: &y, weights: Some(&w) };
        let a = differentiate(&spec, &params, &adv, &base, Wants::NONE).unwrap().loss_value;

        let rows: Vec<usize> = (0..5).chain([j]).collect();
        let x2 = x.select_rows(&rows);
        let adv2 = adv.select_rows(&rows);
        let y2: Vec<usize> = rows.iter().map(|&i| y[i]).collect();
        let mut w2: Vec<f32> = rows.iter().map(|&i| w[i]).collect();
        w2[j] /= 2.0;
        w2[5] /= 2.0;
        let dup = TrainingObjective { config: cfg, clean: &x2, labels: &y2, weights: Some(&w2) };
        let b = differentiate(&spec, &params, &adv2, &dup, Wants::NONE).unwrap().loss_value;
        prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
    }
}
