mod common;

use std::fs;

use ems_core::checkpoint;
use ems_core::corpus::make_batches;
use ems_core::model::Model;
use ems_core::objectives::Ablations;
use ems_core::trainer::{parse_curve, resume_state, train, train_step, TrainConfig, TrainState};

fn cfg(max_steps: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        warmup_steps: 5,
        batch_size: 8,
        epochs: 100,
        max_steps: Some(max_steps),
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let corpus = common::toy_corpus(32, 10, 1);
    let vocab = common::toy_vocab(&corpus);
    let model: Model<f32> = Model::new(common::small_config(&vocab), Ablations::default(), 0).unwrap();
    let c = TrainConfig { lr: 0.0, ..cfg(1) };
    let mut state = TrainState::new(model.clone(), &c);
    let batch = &make_batches(&corpus, &vocab, 8, 0).unwrap()[0];
    let report = train_step(&mut state, batch, &c).unwrap();
    assert!(report.joint > 0.0);
    assert_eq!(state.model.store, model.store);
    assert_eq!(state.step, 1);
}

#[test]
fn loss_curve_has_one_row_per_step() {
    let corpus = common::toy_corpus(64, 10, 2);
    let vocab = common::toy_vocab(&corpus);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&corpus, &vocab, &common::small_config(&vocab), &cfg(50), dir.path(), None, |_| {}).unwrap();
    let text = fs::read_to_string(&out.loss_curve).unwrap();
    assert!(text.starts_with("step,lr,xtr,cntrs,joint\n"));
    let rows = parse_curve(&text).unwrap();
    assert_eq!(rows.len(), 50);
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=50).collect::<Vec<_>>());
    assert!(out.checkpoint.exists());
}

#[test]
fn same_seed_gives_identical_trajectories() {
    let corpus = common::toy_corpus(64, 10, 3);
    let vocab = common::toy_vocab(&corpus);
    let m = common::small_config(&vocab);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = train(&corpus, &vocab, &m, &cfg(20), d1.path(), None, |_| {}).unwrap();
    let b = train(&corpus, &vocab, &m, &cfg(20), d2.path(), None, |_| {}).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.state.model.store, b.state.model.store);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let corpus = common::toy_corpus(60, 10, 4);
    let vocab = common::toy_vocab(&corpus);
    let m = common::small_config(&vocab);
    let straight_dir = tempfile::tempdir().unwrap();
    // 60 pairs in batches of 8 end each epoch on a short batch; 30 steps span several epochs
    let straight = train(&corpus, &vocab, &m, &cfg(30), straight_dir.path(), None, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = train(&corpus, &vocab, &m, &cfg(13), dir.path(), None, |_| {}).unwrap();
    assert_eq!(first.state.step, 13);
    let (state, saved_cfg) = resume_state(&first.checkpoint).unwrap();
    assert_eq!(saved_cfg.unwrap(), cfg(13));
    let resumed = train(&corpus, &vocab, &m, &cfg(30), dir.path(), Some(state), |_| {}).unwrap();

    assert_eq!(resumed.curve, straight.curve);
    assert_eq!(resumed.state.model.store, straight.state.model.store);
    assert_eq!(resumed.state.adam, straight.state.adam);
    assert_eq!(
        fs::read_to_string(&resumed.loss_curve).unwrap(),
        fs::read_to_string(&straight.loss_curve).unwrap()
    );
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let corpus = common::toy_corpus(32, 10, 5);
    let vocab = common::toy_vocab(&corpus);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&corpus, &vocab, &common::small_config(&vocab), &cfg(5), dir.path(), None, |_| {}).unwrap();
    let loaded = checkpoint::load(&out.checkpoint).unwrap();
    assert_eq!(loaded.step, 5);
    assert_eq!(loaded.model.store, out.state.model.store);
    let batch = &make_batches(&corpus, &vocab, 8, 1).unwrap()[0];
    let a = out.state.model.encode_pair(batch, false, 0, false).unwrap();
    let b = loaded.model.encode_pair(batch, false, 0, false).unwrap();
    assert_eq!(a.u(), b.u());
    assert_eq!(a.v(), b.v());
    let la = out.state.model.forward_backward(batch, false, 0, None).unwrap();
    let lb = loaded.model.forward_backward(batch, false, 0, None).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ckpt");
    fs::write(&p, b"EMSCKPT 1\nconfig\t{}\n").unwrap();
    assert!(matches!(checkpoint::load(&p), Err(ems_core::EmsError::Format { .. })));
    fs::write(&p, b"something else").unwrap();
    assert!(matches!(checkpoint::load(&p), Err(ems_core::EmsError::Format { .. })));
}

#[test]
fn joint_loss_decreases_on_the_toy_task() {
    let corpus = common::toy_corpus(128, 10, 6);
    let vocab = common::toy_vocab(&corpus);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&corpus, &vocab, &common::small_config(&vocab), &cfg(120), dir.path(), None, |_| {}).unwrap();
    let head: f64 = out.curve[..10].iter().map(|r| r.loss.joint).sum::<f64>() / 10.0;
    let tail: f64 = out.curve[110..].iter().map(|r| r.loss.joint).sum::<f64>() / 10.0;
    assert!(tail < head, "joint loss went from {head} to {tail}");
}

#[test]
fn invalid_configs_are_rejected() {
    let corpus = common::toy_corpus(16, 10, 7);
    let vocab = common::toy_vocab(&corpus);
    let dir = tempfile::tempdir().unwrap();
    let both = TrainConfig {
        ablation_flags: Ablations { no_cntrs: true, no_xtr: true, ..Ablations::default() },
        ..cfg(1)
    };
    let single = TrainConfig { batch_size: 1, ..cfg(1) };
    let no_epochs = TrainConfig { epochs: 0, ..cfg(1) };
    for c in [both, single, no_epochs] {
        let r = train(&corpus, &vocab, &common::small_config(&vocab), &c, dir.path(), None, |_| {});
        assert!(matches!(r, Err(ems_core::EmsError::Config(_))));
    }
}

#[test]
fn train_config_reads_flat_json() {
    let c: TrainConfig = serde_json::from_str(
        r#"{"lr": 0.001, "batch_size": 16, "ablation_flags": {"share_Lemb": true}}"#,
    )
    .unwrap();
    assert_eq!(c.lr, 0.001);
    assert_eq!(c.batch_size, 16);
    assert!(c.ablation_flags.share_lemb);
    assert_eq!(c.warmup_steps, 200);
    assert_eq!(c.weight_decay, 1e-5);
}
