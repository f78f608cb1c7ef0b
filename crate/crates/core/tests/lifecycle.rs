use proptest::prelude::*;

use rosetta_core::data::{Split, TaskData};
use rosetta_core::diffcore::Tensor;
use rosetta_core::gatednet::Architecture;
use rosetta_core::harness::{generate_tasks, TaskSpec};
use rosetta_core::lifecycle::{
    discretize, thresholds_from_samples, Engine, SoftGateSamples, TrainConfig, PROBE_SIZE,
};
use rosetta_core::Error;

fn spec(num_classes: usize, shift: f64, overlap: usize, seed: u64) -> TaskSpec {
    TaskSpec {
        num_classes,
        samples_per_class: 60,
        feature_dim: 8,
        shift,
        class_overlap: overlap,
        seed,
    }
}

fn small_arch() -> Architecture {
    Architecture::new(8, vec![16, 16])
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs_teacher: 4,
        epochs_student: 4,
        epochs_finetune: 2,
        ..TrainConfig::default()
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn first_task_commits_without_diversity_weights() {
    let tasks = generate_tasks(&[spec(3, 0.0, 0, 1)], 5).unwrap();
    let mut engine = Engine::new(small_arch(), 5).unwrap();
    let out = engine.train_task(&tasks[0], &quick()).unwrap();
    assert!(out.record.phis.is_empty());
    assert_eq!(engine.bank.len(), 1);
    assert_eq!(out.record.probe_inputs.rows(), PROBE_SIZE.min(tasks[0].val.len()));
    let replay = engine.infer(1, &out.record.probe_inputs).unwrap();
    assert_eq!(bits(&replay), bits(&out.record.probe_logits));
    assert!(out.thresholds.layers.iter().flatten().all(|g| (0.0..=1.0).contains(g)));
    assert!(out.final_student_loss.is_finite());
    assert_eq!(out.newly_frozen, engine.net.frozen_count());
}

#[test]
fn earlier_tasks_replay_exactly_and_masks_only_grow() {
    let specs = [spec(3, 0.0, 0, 1), spec(3, 3.0, 1, 2), spec(4, 6.0, 2, 3)];
    let tasks = generate_tasks(&specs, 9).unwrap();
    let mut engine = Engine::new(small_arch(), 9).unwrap();
    let mut prev_mask = engine.net.freeze_mask.clone();
    let mut prev_count = 0;
    for (t, task) in tasks.iter().enumerate() {
        let out = engine.train_task(task, &quick()).unwrap();
        assert_eq!(out.record.phis.len(), t);
        assert!(out.record.phis.iter().all(|p| (0.0..=1.0).contains(p)));
        for (old, new) in prev_mask.iter().flatten().zip(engine.net.freeze_mask.iter().flatten()) {
            assert!(!old || *new, "a frozen channel was released");
        }
        assert!(engine.net.frozen_count() >= prev_count);
        prev_mask = engine.net.freeze_mask.clone();
        prev_count = engine.net.frozen_count();
        for r in engine.bank.records() {
            let replay = engine.infer(r.task_id, &r.probe_inputs).unwrap();
            assert_eq!(bits(&replay), bits(&r.probe_logits), "task {} after task {}", r.task_id, t + 1);
        }
    }
}

#[test]
fn finetuning_does_not_raise_the_task_loss() {
    let tasks = generate_tasks(&[spec(3, 0.0, 0, 4)], 2).unwrap();
    let mut engine = Engine::new(Architecture::new(8, vec![12]), 2).unwrap();
    let out = engine.train_task(&tasks[0], &quick()).unwrap();
    assert!(out.finetune.after <= out.finetune.before, "{:?}", out.finetune);
}

#[test]
fn failed_task_leaves_engine_untouched() {
    let tasks = generate_tasks(&[spec(3, 0.0, 0, 1), spec(3, 2.0, 0, 2)], 3).unwrap();
    let mut engine = Engine::new(small_arch(), 3).unwrap();
    engine.train_task(&tasks[0], &quick()).unwrap();
    let bank = engine.bank.encode();
    let net = engine.net.clone();
    let gate = engine.gate.clone();

    // Fails only after teacher and student training have run.
    let mut broken = tasks[1].clone();
    broken.val = Split::new(Tensor::zeros(vec![0, 8]), Vec::new()).unwrap();
    assert!(engine.train_task(&broken, &quick()).is_err());
    assert_eq!(engine.bank.encode(), bank);
    assert_eq!(engine.net, net);
    assert_eq!(engine.gate, gate);

    assert!(matches!(engine.train_task(&tasks[0], &quick()), Err(Error::DuplicateTask(1))));
    let narrow = TaskData {
        task_id: 7,
        class_ids: vec![0],
        train: Split::new(Tensor::zeros(vec![2, 3]), vec![0, 0]).unwrap(),
        val: Split::new(Tensor::zeros(vec![1, 3]), vec![0]).unwrap(),
    };
    assert!(engine.train_task(&narrow, &quick()).is_err());
    assert!(engine.train_task(&tasks[1], &TrainConfig { epochs_finetune: 0, ..quick() }).is_err());
    assert_eq!(engine.bank.encode(), bank);
    assert_eq!(engine.net, net);
}

#[test]
fn unknown_task_cannot_be_inferred() {
    let engine = Engine::new(small_arch(), 0).unwrap();
    let x = Tensor::zeros(vec![1, 8]);
    assert!(matches!(engine.infer(4, &x), Err(Error::UnknownTask(4))));
}

/// `phi` of a repeated task stays near zero and a far-shifted task scores
/// higher, seed by seed on the shared reference width.
#[test]
fn repeated_task_gets_small_weight_and_shifted_task_larger() {
    let cfg = TrainConfig { epochs_teacher: 6, epochs_student: 6, ..TrainConfig::default() };
    let arch = Architecture::new(16, vec![64, 64, 64]);
    let mut same = Vec::new();
    let mut far = Vec::new();
    for seed in 0..5u64 {
        let run = |shift: f64| -> f64 {
            let base = TaskSpec { samples_per_class: 100, feature_dim: 16, ..spec(5, 0.0, 0, 10 + seed) };
            let next = TaskSpec { shift, class_overlap: 5, seed: 20 + seed, ..base.clone() };
            let tasks = generate_tasks(&[base, next], seed).unwrap();
            let mut engine = Engine::new(arch.clone(), seed).unwrap();
            let c = TrainConfig { seed, ..cfg };
            let first = engine.train_task(&tasks[0], &c).unwrap();
            let total = arch.total_channels();
            assert!(first.newly_frozen < total, "task 1 froze every channel");
            engine.train_task(&tasks[1], &c).unwrap().record.phis[0]
        };
        same.push(run(0.0));
        far.push(run(5.0));
    }
    assert!(same.iter().all(|&p| p < 0.1), "repeated-task phi {same:?}");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&far) > mean(&same), "shifted {far:?} vs repeated {same:?}");
}

fn sample_layers() -> impl Strategy<Value = SoftGateSamples> {
    (1usize..8, 1usize..5).prop_flat_map(|(n, c)| {
        prop::collection::vec(0.0f64..1.0, n * c)
            .prop_map(move |d| SoftGateSamples { layers: vec![Tensor::matrix(n, c, d).unwrap()] })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn thresholds_are_streaming_means_and_votes_are_majorities(s in sample_layers()) {
        let th = thresholds_from_samples(&s).unwrap();
        let gates = discretize(&s, &th).unwrap();
        let t = &s.layers[0];
        for c in 0..t.cols() {
            let mut mean = 0.0;
            for r in 0..t.rows() {
                mean += (t.at(r, c) - mean) / (r + 1) as f64;
            }
            let gamma = th.layers[0][c];
            prop_assert!((0.0..=1.0).contains(&gamma));
            prop_assert!((gamma - mean).abs() < 1e-12);
            let votes = (0..t.rows()).filter(|&r| t.at(r, c) >= gamma).count();
            prop_assert_eq!(gates.layers[0][c], 2 * votes > t.rows());
        }
    }
}
