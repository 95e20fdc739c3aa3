mod common;

use ems_core::corpus::make_batches;
use ems_core::model::Model;
use ems_core::objectives::{infonce_both_directions, Ablations};
use ems_core::trainer::{train_step, TrainConfig, TrainState};
use ndarray::{Array2, Axis};

fn setup(ablation: Ablations) -> (Model<f64>, ems_core::corpus::Batch, ems_core::corpus::Vocabulary) {
    let corpus = common::toy_corpus(40, 12, 9);
    let vocab = common::toy_vocab(&corpus);
    let model = Model::new(common::small_config(&vocab), ablation, 5).unwrap();
    let batch = make_batches(&corpus, &vocab, 8, 2).unwrap().swap_remove(0);
    (model, batch, vocab)
}

#[test]
fn no_lang_tok_ignores_the_target_language() {
    let a = Ablations { no_lang_tok: true, ..Ablations::default() };
    let (m, batch, vocab) = setup(a);
    let out = m.encode_pair(&batch, false, 0, false).unwrap();
    let langs: Vec<u32> = vocab.lang_token_ids().values().copied().collect();
    let reference = m
        .xtr
        .log_distributions(&m.store, &out.u(), &vec![langs[0]; batch.size()], true)
        .unwrap();
    for &l in &langs[1..] {
        let other = m.xtr.log_distributions(&m.store, &out.u(), &vec![l; batch.size()], true).unwrap();
        assert_eq!(other, reference);
    }
    // the full model does depend on it
    let with = m.xtr.log_distributions(&m.store, &out.u(), &vec![langs[1]; batch.size()], false).unwrap();
    assert_ne!(with, reference);
}

#[test]
fn share_lemb_ties_output_embedding_to_token_embedding() {
    let shared = Ablations { share_lemb: true, ..Ablations::default() };
    let (m, _, _) = setup(shared);
    assert_eq!(m.xtr.emb_sent, m.encoder.token_embedding);
    assert!(m.store.find("xtr.emb_sent").is_none());
    let (plain, _, _) = setup(Ablations::default());
    assert_ne!(plain.xtr.emb_sent, plain.encoder.token_embedding);
}

/// A token absent from a batch gets no encoder gradient, so its embedding
/// row only moves if the reconstruction output layer writes into it.
fn absent_row_moves(ablation: Ablations) -> bool {
    let corpus = common::toy_corpus(40, 12, 9);
    let vocab = common::toy_vocab(&corpus);
    let model: Model<f32> = Model::new(common::small_config(&vocab), ablation, 5).unwrap();
    let batch = make_batches(&corpus, &vocab, 8, 2).unwrap().swap_remove(0);
    let present: std::collections::BTreeSet<u32> =
        batch.src_ids.iter().chain(batch.tgt_ids.iter()).copied().collect();
    let absent = (vocab.first_content_id()..vocab.d_vcb() as u32)
        .find(|id| !present.contains(id))
        .unwrap() as usize;
    let cfg = TrainConfig { lr: 1e-2, warmup_steps: 0, weight_decay: 0.0, ..TrainConfig::default() };
    let tok = model.encoder.token_embedding;
    let before = model.store.mat(tok).row(absent).to_owned();
    let mut state = TrainState::new(model, &cfg);
    train_step(&mut state, &batch, &cfg).unwrap();
    state.model.store.mat(tok).row(absent) != before
}

#[test]
fn share_lemb_updates_reach_the_encoder_embedding() {
    assert!(absent_row_moves(Ablations { share_lemb: true, ..Ablations::default() }));
    assert!(!absent_row_moves(Ablations::default()));
}

#[test]
fn no_cntrs_leaves_contrastive_head_gradients_zero() {
    let a = Ablations { no_cntrs: true, ..Ablations::default() };
    let (m, batch, _) = setup(a);
    let mut grads = m.store.zeros_like();
    let report = m.forward_backward(&batch, true, 3, Some(&mut grads)).unwrap();
    assert_eq!(report.cntrs, 0.0);
    let mut checked = 0;
    for id in m.store.ids() {
        let name = m.store.name(id);
        if name.starts_with("cntrs.") {
            assert!(grads.get(id).iter().all(|&g| g == 0.0), "{name} has gradient");
            checked += 1;
        }
    }
    assert!(checked >= 2);
    assert!((report.joint - report.xtr / batch.size() as f64).abs() < 1e-12);
}

#[test]
fn no_xtr_leaves_reconstruction_head_gradients_zero() {
    let a = Ablations { no_xtr: true, ..Ablations::default() };
    let (m, batch, _) = setup(a);
    let mut grads = m.store.zeros_like();
    let report = m.forward_backward(&batch, true, 3, Some(&mut grads)).unwrap();
    assert_eq!(report.xtr, 0.0);
    for id in m.store.ids() {
        if m.store.name(id).starts_with("xtr.") {
            assert!(grads.get(id).iter().all(|&g| g == 0.0));
        }
    }
    assert!((report.joint - report.cntrs / batch.size() as f64).abs() < 1e-12);
}

fn unit(x: &Array2<f64>) -> Array2<f64> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    x / &norms.insert_axis(Axis(1))
}

#[test]
fn no_cntrs_mlp_uses_pooled_cosines_directly() {
    let a = Ablations { no_cntrs_mlp: true, ..Ablations::default() };
    let (m, batch, _) = setup(a);
    let out = m.encode_pair(&batch, false, 0, false).unwrap();
    let sim = unit(&out.u().to_owned()).dot(&unit(&out.v().to_owned()).t());
    let (expected, _) = infonce_both_directions(&sim, m.cfg.temperature);
    let got = m.contrastive_loss(&out.u(), &out.v()).unwrap();
    assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");

    let (full, _, _) = setup(Ablations::default());
    let out = full.encode_pair(&batch, false, 0, false).unwrap();
    let sim = unit(&out.u().to_owned()).dot(&unit(&out.v().to_owned()).t());
    let (direct, _) = infonce_both_directions(&sim, full.cfg.temperature);
    assert!((full.contrastive_loss(&out.u(), &out.v()).unwrap() - direct).abs() > 1e-6);
}
