mod common;

use std::collections::BTreeSet;

use common::brute_best_f1;
use faircl::datastream::{generate_synthetic, SyntheticConfig, TaskEntry, TaskStream};
use faircl::metrics::best_f1_threshold;
use faircl::model::{ModelState, TargetVector};
use faircl::rng_for;
use faircl::runner::prepare_stream;
use faircl::strategies::*;

fn stream(tasks: usize, seed: u64) -> TaskStream {
    let config = SyntheticConfig {
        num_labels: 2 * tasks,
        tasks,
        samples_per_label: 40,
        feature_dim: 2 * tasks + 2,
        label_correlations: 0.3,
        seed,
        ..Default::default()
    };
    let ds = generate_synthetic(&config).unwrap();
    prepare_stream(&ds, &config.task_specs(), Default::default(), seed).unwrap()
}

fn quick(kind: StrategyKind) -> StrategyConfig {
    StrategyConfig {
        epochs: 2,
        batch_size: 8,
        hidden_layers: vec![6],
        seed: 3,
        ..StrategyConfig::new(kind)
    }
}

fn bits(m: &ModelState) -> Vec<u64> {
    m.parameters().map(f64::to_bits).collect()
}

fn entries(n: usize) -> Vec<TaskEntry> {
    (0..n)
        .map(|i| TaskEntry {
            sample: i,
            task: 0,
            target: TargetVector::from_labels(&[true]),
        })
        .collect()
}

#[test]
fn reservoir_retains_each_sample_uniformly() {
    let pool = entries(100);
    let (first, second) = pool.split_at(40);
    let trials = 10_000u64;
    let mut counts = [0u64; 100];
    for t in 0..trials {
        let mut buffer = ReplayBuffer::new(3);
        let mut rng = rng_for(t, 77);
        buffer.update(first, &mut rng);
        buffer.update(second, &mut rng);
        assert_eq!(buffer.len(), 3);
        assert_eq!(buffer.seen(), 100);
        let ids: BTreeSet<usize> = buffer.entries().iter().map(|e| e.sample).collect();
        assert_eq!(ids.len(), 3, "drawn without replacement");
        for i in ids {
            counts[i] += 1;
        }
    }
    let expected = (trials * 3) as f64 / 100.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 0.99 quantile of chi-square with 99 degrees of freedom
    assert!(chi2 < 134.642, "chi-square {chi2:.1}");
}

#[test]
fn buffer_edge_cases() {
    let mut rng = rng_for(0, 0);
    let mut b = ReplayBuffer::new(10);
    b.update(&[], &mut rng);
    assert!(b.is_empty());
    b.update(&entries(6), &mut rng);
    assert_eq!(b.entries().len(), 6);
    assert_eq!(ReplayBuffer::for_dataset(101, 0.03).capacity(), 4);
}

#[test]
fn sequences_track_head_growth_and_checkpoints() {
    let s = stream(5, 1);
    for kind in StrategyKind::ALL {
        let out = train_sequence(&quick(kind), &s).unwrap();
        assert_eq!(out.checkpoints.len(), 5, "{kind}");
        assert_eq!(out.thresholds.len(), 5, "{kind}");
        let heads: Vec<usize> = out.checkpoints.iter().map(|m| m.num_outputs()).collect();
        if kind == StrategyKind::Joint {
            assert!(heads.iter().all(|&h| h == 10));
        } else {
            assert_eq!(heads, [2, 4, 6, 8, 10], "{kind}");
        }
        let teachers = if kind.uses_teacher() { 4 } else { 0 };
        assert_eq!(out.teacher_snapshots, teachers, "{kind}");
        let draws: usize = out.logs.iter().map(|l| l.buffer_draws).sum();
        assert_eq!(draws > 0, kind.uses_buffer(), "{kind}");
        let again = train_sequence(&quick(kind), &s).unwrap();
        for (a, b) in out.checkpoints.iter().zip(&again.checkpoints) {
            assert_eq!(bits(a), bits(b), "{kind} not deterministic");
        }
    }
}

#[test]
fn only_rehearsal_strategies_touch_old_train_sets() {
    let s = stream(3, 2);
    for kind in [
        StrategyKind::FineTune,
        StrategyKind::Lwf,
        StrategyKind::PseudoLabel,
    ] {
        let out = train_sequence(&quick(kind), &s).unwrap();
        for (j, log) in out.logs.iter().enumerate() {
            let current: BTreeSet<usize> = s.tasks[j].train.iter().map(|e| e.sample).collect();
            assert!(log.samples_used.is_subset(&current), "{kind} task {j}");
        }
    }
    let out = train_sequence(&quick(StrategyKind::Replay), &s).unwrap();
    let current: BTreeSet<usize> = s.tasks[2].train.iter().map(|e| e.sample).collect();
    assert!(!out.logs[2].samples_used.is_subset(&current));
}

#[test]
fn teacher_is_the_model_before_the_task() {
    let s = stream(3, 4);
    let cfg = quick(StrategyKind::Lwf);
    let out = train_sequence(&cfg, &s).unwrap();
    for j in 1..3 {
        let teacher = out.checkpoints[j - 1].clone();
        let mut student = teacher
            .expand_output_head(s.tasks[j].label_indices.len(), cfg.seed)
            .unwrap();
        lwf_task(&mut student, &teacher, &s, j, &cfg).unwrap();
        assert_eq!(bits(&student), bits(&out.checkpoints[j]));
    }
}

#[test]
fn lwf_replay_without_distillation_is_replay() {
    let s = stream(3, 5);
    let replay = train_sequence(&quick(StrategyKind::Replay), &s).unwrap();
    let mixed = train_sequence(
        &StrategyConfig {
            tau_lwf: 0.0,
            ..quick(StrategyKind::LwfReplay)
        },
        &s,
    )
    .unwrap();
    assert_eq!(bits(&replay.final_model), bits(&mixed.final_model));
    let ft = train_sequence(&quick(StrategyKind::FineTune), &s).unwrap();
    assert_eq!(bits(&mixed.checkpoints[0]), bits(&ft.checkpoints[0]));
}

#[test]
fn fine_tune_epoch_lowers_training_loss() {
    let s = stream(1, 6);
    let cfg = StrategyConfig {
        epochs: 5,
        learning_rate: 0.1,
        ..quick(StrategyKind::FineTune)
    };
    let out = train_sequence(&cfg, &s).unwrap();
    let losses = &out.logs[0].epoch_losses;
    assert_eq!(losses.len(), 5);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn thresholds_match_brute_force_on_validation_sets() {
    let s = stream(3, 7);
    let out = train_sequence(&quick(StrategyKind::FineTune), &s).unwrap();
    let model = &out.final_model;
    let table = calibrate_thresholds(model, &s, 2).unwrap();
    assert_eq!(table.entries.len(), 6);
    for e in &table.entries {
        let val = &s.tasks[e.origin_task].val;
        let scores: Vec<f64> = val
            .iter()
            .map(|v| model.forward(&s.samples[v.sample].features).unwrap()[e.label_index])
            .collect();
        let truths: Vec<bool> = val
            .iter()
            .map(|v| s.samples[v.sample].truth[e.label_index])
            .collect();
        let (t, f1) = brute_best_f1(&scores, &truths);
        assert_eq!((e.threshold, e.f1), (t, Some(f1)));
        assert_eq!(best_f1_threshold(&scores, &truths).unwrap(), (t, f1));
    }
}

#[test]
fn pseudo_labels_are_hard_and_follow_the_cutoff() {
    let s = stream(2, 8);
    let out = train_sequence(&quick(StrategyKind::PseudoLabel), &s).unwrap();
    let teacher = &out.checkpoints[0];
    let pairs: Vec<(&[f64], &TargetVector)> = s.tasks[1]
        .train
        .iter()
        .map(|e| (s.samples[e.sample].features.as_slice(), &e.target))
        .collect();
    let mut table = out.thresholds[0].clone();
    let aug = pseudo_label_targets(teacher, &table, &pairs, 2).unwrap();
    for (t, (x, orig)) in aug.iter().zip(&pairs) {
        let p = teacher.forward(x).unwrap();
        for l in 0..2 {
            assert!(t.known[l]);
            assert_eq!(
                t.values[l],
                (p[l] >= table.entries[l].threshold) as u8 as f64
            );
        }
        assert_eq!(&t.values[2..], &orig.values[2..]);
        assert_eq!(&t.known[2..], &orig.known[2..]);
    }
    for e in &mut table.entries {
        e.threshold = 1.0;
    }
    let zeros = pseudo_label_targets(teacher, &table, &pairs, 2).unwrap();
    assert!(zeros
        .iter()
        .all(|t| t.values[..2].iter().all(|&v| v == 0.0)));
}
