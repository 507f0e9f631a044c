mod common;

use common::fixtures::*;
use fusionseg::nn::{Parameterized, Slot};
use fusionseg::trainer::{
    fit, load_checkpoint, resume, save_checkpoint, train_step, TrainConfig, TrainError, TrainState, LAST_CHECKPOINT,
    MANIFEST,
};
use ndarray::ArrayD;

fn snapshot(state: &mut TrainState<f32>) -> Vec<(String, ArrayD<f32>)> {
    let mut out = Vec::new();
    state.model.visit("", &mut |n, slot| match slot {
        Slot::Param(p) => out.push((n.to_string(), p.value.clone())),
        Slot::Buffer(b) => out.push((n.to_string(), b.clone())),
    });
    out
}

fn grad_norm(state: &mut TrainState<f32>, prefix: &str) -> f64 {
    let mut s = 0.0f64;
    state.model.visit("", &mut |n, slot| {
        if let Slot::Param(p) = slot {
            if n.starts_with(prefix) {
                s += p.grad.iter().map(|&g| f64::from(g).powi(2)).sum::<f64>();
            }
        }
    });
    s.sqrt()
}

#[test]
fn one_step_is_deterministic_and_reaches_every_module() {
    let split = tiny_split(0.3);
    let cfg = tiny_train(1);
    let run = || {
        let mut s = TrainState::<f32>::new(tiny_net(), &cfg).unwrap();
        let batch = s.next_batch(&split, &cfg).unwrap().tensors::<f32>(&split);
        assert!(batch.n_labeled > 0 && batch.n_unlabeled() > 0);
        let report = train_step(&mut s, &batch, &cfg).unwrap();
        (s, report)
    };
    let (mut s1, r1) = run();
    let (mut s2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(snapshot(&mut s1), snapshot(&mut s2));
    assert_eq!(s1.step, 1);
    for prefix in ["a.mem", "b.mem", "cif.", "a.enc", "b.dec"] {
        assert!(grad_norm(&mut s1, prefix) > 0.0, "{prefix} received no gradient");
    }
}

#[test]
fn weight_decay_is_decoupled_from_the_loss() {
    let split = tiny_split(0.3);
    let with = tiny_train(3);
    let without = TrainConfig { weight_decay: 0.0, ..with.clone() };
    let mut a = TrainState::<f32>::new(tiny_net(), &with).unwrap();
    let mut b = TrainState::<f32>::new(tiny_net(), &without).unwrap();
    let batch = a.next_batch(&split, &with).unwrap().tensors::<f32>(&split);
    let ra = train_step(&mut a, &batch, &with).unwrap();
    let rb = train_step(&mut b, &batch, &without).unwrap();
    assert_eq!(ra, rb);
    assert_ne!(snapshot(&mut a), snapshot(&mut b));
}

#[test]
fn zero_consistency_weight_ignores_a_missing_unlabeled_part() {
    let split = tiny_split(1.0);
    assert!(split.unlabeled.is_empty());
    let base = tiny_train(1);
    let no_cons = TrainConfig {
        weights: fusionseg::objectives::LossWeights { lambda_cons: 0.0, ..base.weights },
        ..base.clone()
    };
    let mut a = TrainState::<f32>::new(tiny_net(), &base).unwrap();
    let mut b = TrainState::<f32>::new(tiny_net(), &no_cons).unwrap();
    let batch = a.next_batch(&split, &base).unwrap().tensors::<f32>(&split);
    assert_eq!(batch.n_unlabeled(), 0);
    let ra = train_step(&mut a, &batch, &base).unwrap();
    let rb = train_step(&mut b, &batch, &no_cons).unwrap();
    assert_eq!(ra.l_final, ra.l_sup_total);
    assert_eq!(ra, rb);
    assert_eq!(snapshot(&mut a), snapshot(&mut b));
}

#[test]
fn checkpoint_round_trip_continues_identically() {
    let split = tiny_split(0.3);
    let cfg = tiny_train(4);
    let dir = tempfile::tempdir().unwrap();
    let (mut state, _) = fit::<f32>(&split, &tiny_net(), &cfg, None).unwrap();
    save_checkpoint(&mut state, dir.path().join("c.ckpt")).unwrap();
    let mut loaded = load_checkpoint::<f32>(dir.path().join("c.ckpt")).unwrap();
    assert_eq!(snapshot(&mut loaded), snapshot(&mut state));
    assert_eq!(loaded.optimizer.t, state.optimizer.t);
    assert_eq!(loaded.optimizer.m, state.optimizer.m);
    assert_eq!(loaded.optimizer.v, state.optimizer.v);
    assert_eq!((loaded.step, loaded.schedule, loaded.best_val_dice), (state.step, state.schedule, state.best_val_dice));

    let b1 = state.next_batch(&split, &cfg).unwrap().tensors::<f32>(&split);
    let b2 = loaded.next_batch(&split, &cfg).unwrap().tensors::<f32>(&split);
    assert_eq!(b1.image_a, b2.image_a);
    let r1 = train_step(&mut state, &b1, &cfg).unwrap();
    let r2 = train_step(&mut loaded, &b2, &cfg).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(snapshot(&mut loaded), snapshot(&mut state));
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let split = tiny_split(0.3);
    let short = tiny_train(6);
    let long = tiny_train(12);
    let dir = tempfile::tempdir().unwrap();
    let (_, _) = fit::<f32>(&split, &tiny_net(), &short, Some(dir.path())).unwrap();
    let mut resumed = load_checkpoint::<f32>(dir.path().join(LAST_CHECKPOINT)).unwrap();
    let tail = resume(&mut resumed, &split, &long, None).unwrap();
    let (mut straight, history) = fit::<f32>(&split, &tiny_net(), &long, None).unwrap();
    assert_eq!(tail.losses[..], history.losses[6..]);
    assert_eq!(snapshot(&mut resumed), snapshot(&mut straight));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let split = tiny_split(0.3);
    let (mut state, _) = fit::<f32>(&split, &tiny_net(), &tiny_train(2), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("c.ckpt");
    save_checkpoint(&mut state, &ckpt).unwrap();

    let manifest = std::fs::read_to_string(ckpt.join(MANIFEST)).unwrap();
    let edited = manifest.replacen("\"shape\": [\n        4,", "\"shape\": [\n        5,", 1);
    assert_ne!(edited, manifest);
    std::fs::write(ckpt.join(MANIFEST), &edited).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&ckpt), Err(TrainError::CorruptCheckpoint(_))));
    std::fs::write(ckpt.join(MANIFEST), &manifest).unwrap();
    assert!(load_checkpoint::<f32>(&ckpt).is_ok());

    std::fs::remove_file(ckpt.join("a.enc.l1.conv1.weight.f32")).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&ckpt), Err(TrainError::CorruptCheckpoint(_))));
    assert!(matches!(load_checkpoint::<f64>(dir.path().join("missing")), Err(TrainError::CorruptCheckpoint(_))));
}

#[test]
fn fit_writes_log_and_checkpoints() {
    let split = tiny_split(0.3);
    let dir = tempfile::tempdir().unwrap();
    let (state, history) = fit::<f32>(&split, &tiny_net(), &tiny_train(10), Some(dir.path())).unwrap();
    assert_eq!(state.step, 10);
    assert_eq!(history.losses.len(), 10);
    assert_eq!(history.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![5, 10]);
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 12);
    assert_eq!(lines[0]["kind"], "step");
    assert_eq!(lines[0]["step"], 1);
    assert!(lines[0]["l_final"].is_f64());
    assert_eq!(lines[5]["kind"], "eval");
    assert!(dir.path().join("best.ckpt").join(MANIFEST).is_file());
    assert!(dir.path().join("last.ckpt").join(MANIFEST).is_file());
}

#[test]
fn invalid_configs_are_rejected() {
    let split = tiny_split(0.3);
    for cfg in [
        TrainConfig { max_steps: 0, ..tiny_train(1) },
        TrainConfig { learning_rate: 0.0, ..tiny_train(1) },
        TrainConfig { batch_labeled: 0, ..tiny_train(1) },
    ] {
        assert!(matches!(fit::<f32>(&split, &tiny_net(), &cfg, None), Err(TrainError::InvalidConfig(_))));
    }
}
