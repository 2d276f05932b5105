use mstop_core::ddtm::{DdtmConfig, DdtmParams, DecodeMode};
use mstop_core::trainer::{
    baseline_greedy_rollout, grouped_baselines, make_batch, reinforce_step, surrogate_grads, train, BaselineKind,
    BatchItem, TrainConfig,
};
use mstop_numkit::{AdamConfig, AdamState};
use proptest::prelude::*;

fn small(seed: u64) -> TrainConfig {
    TrainConfig {
        n: 4,
        epochs: 2,
        steps_per_epoch: 2,
        batch: 16,
        val_size: 8,
        lr: 1e-3,
        ..TrainConfig::tiny(seed)
    }
}

fn model(cfg: &TrainConfig) -> DdtmParams {
    let m = DdtmConfig {
        d: 16,
        heads: 2,
        d_ff: 32,
        ..DdtmConfig::default()
    };
    DdtmParams::new(m, cfg.model_seed).unwrap()
}

fn zero_prizes(items: &mut [BatchItem]) {
    for it in items {
        for c in &mut it.instance.customers {
            c.prize = 0.0;
        }
    }
}

#[test]
fn zero_epochs_leave_params_alone() {
    let cfg = TrainConfig { epochs: 0, ..small(1) };
    let p = model(&cfg);
    let out = train(&cfg, p.clone(), None).unwrap();
    assert!(out.reports.is_empty());
    assert_eq!(out.params.store, p.store);
}

#[test]
fn identical_seeds_give_identical_reports() {
    let cfg = small(2);
    let a = train(&cfg, model(&cfg), None).unwrap();
    let b = train(&cfg, model(&cfg), None).unwrap();
    let strip = |r: &[mstop_core::trainer::EpochReport]| {
        r.iter()
            .map(|e| serde_json::to_string(e).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a.reports), strip(&b.reports));
    assert_eq!(a.params.store, b.params.store);
}

#[test]
fn null_signal_leaves_trainable_params_unchanged() {
    for baseline in [BaselineKind::InstanceAug, BaselineKind::GreedyRollout, BaselineKind::BatchMean] {
        let mut cfg = TrainConfig { alpha: 0.0, baseline, ..small(3) };
        if baseline != BaselineKind::InstanceAug {
            cfg.k_aug = 1;
        }
        let mut p = model(&cfg);
        let frozen = p.clone();
        let before = p.store.clone();
        let mut adam = AdamState::new(&p.store, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        for step in 0..10 {
            let mut items = make_batch(&cfg, step).unwrap();
            zero_prizes(&mut items);
            let r = reinforce_step(&mut p, &mut adam, &items, &cfg, Some(&frozen), step as usize).unwrap();
            assert_eq!(r.mean_reward, 0.0);
            assert!(r.grad_norm <= 1e-9);
        }
        for id in p.store.trainable_ids() {
            assert_eq!(p.store.get(id), before.get(id), "{}", p.store.name(id));
        }
    }
}

#[test]
fn entropy_bonus_raises_entropy_on_a_probe_batch() {
    let cfg = TrainConfig {
        alpha: 0.05,
        n: 6,
        ..small(4)
    };
    let mut p = model(&cfg);
    let mut items = make_batch(&cfg, 0).unwrap();
    zero_prizes(&mut items);
    let actions: Vec<Vec<usize>> = items
        .iter()
        .map(|it| p.rollout(&it.instance, &it.order, DecodeMode::Sample(it.seed)).unwrap().actions())
        .collect();
    let mut adam = AdamState::new(&p.store, AdamConfig::default());
    let probe = |p: &DdtmParams| -> f64 {
        let mut total = 0.0;
        let mut steps = 0;
        for (it, a) in items.iter().zip(&actions) {
            let t = p.rollout(&it.instance, &it.order, DecodeMode::Forced(a)).unwrap();
            total += t.steps.iter().map(|s| s.entropy).sum::<f64>();
            steps += t.steps.len();
        }
        total / steps as f64
    };
    let mut last = probe(&p);
    for step in 0..10 {
        let mut rollouts: Vec<_> = items
            .iter()
            .zip(&actions)
            .map(|(it, a)| p.rollout_taped(&it.instance, &it.order, DecodeMode::Forced(a)).unwrap())
            .collect();
        let zeros = vec![0.0; rollouts.len()];
        let (grads, _) = surrogate_grads(&p, &mut rollouts, &zeros, cfg.alpha, step).unwrap();
        adam.step(&mut p.store, &grads).unwrap();
        let now = probe(&p);
        assert!(now > last, "step {step}: entropy {now} did not exceed {last}");
        last = now;
    }
}

#[test]
fn frozen_baseline_matches_greedy_and_is_untouched() {
    let cfg = TrainConfig {
        baseline: BaselineKind::GreedyRollout,
        k_aug: 1,
        ..small(5)
    };
    let mut p = model(&cfg);
    let frozen = p.clone();
    let items = make_batch(&cfg, 0).unwrap();
    let b = baseline_greedy_rollout(&frozen, &items).unwrap();
    for (it, b) in items.iter().zip(&b) {
        assert_eq!(*b, p.rollout(&it.instance, &it.order, DecodeMode::Greedy).unwrap().reward);
    }
    let mut adam = AdamState::new(&p.store, AdamConfig::default());
    let snapshot = frozen.store.clone();
    reinforce_step(&mut p, &mut adam, &items, &cfg, Some(&frozen), 0).unwrap();
    assert_eq!(frozen.store, snapshot);
}

#[test]
fn greedy_baseline_validation_never_decreases() {
    let cfg = TrainConfig {
        baseline: BaselineKind::GreedyRollout,
        k_aug: 1,
        alpha: 0.0,
        epochs: 4,
        ..small(6)
    };
    let out = train(&cfg, model(&cfg), None).unwrap();
    let mut last = out.initial_validation;
    for r in &out.reports {
        let v = r.baseline_validation.unwrap();
        assert!(v >= last);
        last = v;
    }
}

#[test]
fn instance_aug_draws_one_eighth_of_the_raw_instances() {
    let d = TrainConfig::tiny(0);
    let a = TrainConfig {
        baseline: BaselineKind::GreedyRollout,
        k_aug: 1,
        alpha: 0.0,
        ..TrainConfig::tiny(0)
    };
    assert_eq!(d.raw_instances_per_epoch() * 8, a.raw_instances_per_epoch());
    let groups = |cfg: &TrainConfig| {
        let items = make_batch(cfg, 0).unwrap();
        assert_eq!(items.len(), cfg.batch);
        items.iter().map(|i| i.group).max().unwrap() + 1
    };
    assert_eq!(groups(&d) * 8, groups(&a));
}

#[test]
fn checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 1, ..small(7) };
    let out = train(&cfg, model(&cfg), Some(dir.path())).unwrap();
    let best = mstop_numkit::load_checkpoint(&dir.path().join("best.ckpt")).unwrap();
    let last = mstop_numkit::load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
    let mut restored = model(&cfg);
    last.restore(&mut restored.store).unwrap();
    assert_eq!(restored.store, out.params.store);
    assert!(best.adam_state(&restored.store).unwrap().is_some());
}

proptest! {
    #[test]
    fn group_advantages_sum_to_zero(rewards in prop::collection::vec(0.0f64..10.0, 8..=8)) {
        let b = grouped_baselines(&rewards, 8).unwrap();
        let sum: f64 = rewards.iter().zip(&b).map(|(r, b)| r - b).sum();
        prop_assert!(sum.abs() <= 1e-12);
    }

    #[test]
    fn equal_rewards_give_exact_zero_advantage(r in 0.0f64..10.0, k in 1usize..9) {
        let rewards = vec![r; k];
        let b = grouped_baselines(&rewards, k).unwrap();
        prop_assert!(rewards.iter().zip(&b).all(|(r, b)| r - b == 0.0));
    }
}
