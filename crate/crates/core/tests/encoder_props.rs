mod common;

use ems_core::corpus::{pad_batch, Batch, EncodedPair};
use ems_core::encoder::mean_pool;
use ems_core::model::Model;
use ems_core::objectives::Ablations;
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> (Model<f32>, ems_core::corpus::Vocabulary) {
    let corpus = common::toy_corpus(40, 12, 1);
    let vocab = common::toy_vocab(&corpus);
    let m = Model::new(common::small_config(&vocab), Ablations::default(), 3).unwrap();
    (m, vocab)
}

fn ids(vocab: &ems_core::corpus::Vocabulary, n: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = vocab.first_content_id();
    (0..n).map(|_| rng.gen_range(lo..vocab.d_vcb() as u32)).collect()
}

#[test]
fn trailing_pads_leave_pooled_output_unchanged() {
    let (m, vocab) = model();
    let sent = ids(&vocab, 5, 1);
    let (a, am) = pad_batch(&[&sent]);
    let alone = m.encode(&a.view(), &am.view(), false, 0).unwrap().pooled;
    for extra in [1, 7, 60] {
        let mut padded = Array2::zeros((1, 5 + extra));
        let mut mask = Array2::zeros((1, 5 + extra));
        padded.slice_mut(s![0, ..5]).assign(&a.row(0));
        mask.slice_mut(s![0, ..5]).fill(1u8);
        let p = m.encode(&padded.view(), &mask.view(), false, 0).unwrap().pooled;
        let diff = (&p - &alone).mapv(f32::abs).fold(0.0f32, |x, &y| x.max(y));
        assert!(diff <= 1e-6, "pads changed output by {diff}");
    }
}

#[test]
fn batching_matches_one_at_a_time() {
    let (m, vocab) = model();
    let short = ids(&vocab, 3, 2);
    let long = ids(&vocab, 11, 3);
    let (b, bm) = pad_batch(&[&short, &long]);
    let both = m.encode(&b.view(), &bm.view(), false, 0).unwrap().pooled;
    for (row, sent) in [&short, &long].into_iter().enumerate() {
        let (x, xm) = pad_batch(&[sent]);
        let single = m.encode(&x.view(), &xm.view(), false, 0).unwrap().pooled;
        let diff = (&single.row(0) - &both.row(row)).mapv(f32::abs).fold(0.0f32, |x, &y| x.max(y));
        assert!(diff <= 1e-6, "row {row} differs by {diff}");
    }
}

#[test]
fn identical_sides_give_identical_embeddings() {
    let (m, vocab) = model();
    let p = EncodedPair {
        src: ids(&vocab, 6, 4),
        tgt: ids(&vocab, 6, 4),
        src_lang: vocab.lang_id("aa").unwrap(),
        tgt_lang: vocab.lang_id("bb").unwrap(),
    };
    let q = EncodedPair {
        src: ids(&vocab, 4, 5),
        tgt: ids(&vocab, 4, 5),
        ..p.clone()
    };
    let batch = Batch::from_pairs(&[&p, &q], vec![0, 1]);
    let out = m.encode_pair(&batch, false, 9, false).unwrap();
    assert_eq!(out.u(), out.v());
}

#[test]
fn inference_is_bitwise_deterministic() {
    let (m, vocab) = model();
    let (x, xm) = pad_batch(&[&ids(&vocab, 9, 6), &ids(&vocab, 2, 7)]);
    let a = m.encode(&x.view(), &xm.view(), false, 1).unwrap().pooled;
    let b = m.encode(&x.view(), &xm.view(), false, 2).unwrap().pooled;
    assert_eq!(a, b);
    let t1 = m.encode(&x.view(), &xm.view(), true, 1).unwrap().pooled;
    let t2 = m.encode(&x.view(), &xm.view(), true, 1).unwrap().pooled;
    assert_eq!(t1, t2);
    assert_ne!(t1, a);
}

#[test]
fn swapping_sides_preserves_the_joint_loss() {
    let corpus = common::toy_corpus(40, 12, 2);
    let vocab = common::toy_vocab(&corpus);
    let m: Model<f64> = Model::new(common::small_config(&vocab), Ablations::default(), 4).unwrap();
    let batch = &ems_core::corpus::make_batches(&corpus, &vocab, 8, 0).unwrap()[0];
    let a = m.forward_backward(batch, false, 0, None).unwrap();
    let b = m.forward_backward(&batch.swapped(), false, 0, None).unwrap();
    assert!((a.joint - b.joint).abs() < 1e-10 * a.joint.abs().max(1.0));
}

#[test]
fn permuting_the_batch_permutes_the_embeddings() {
    let (m, vocab) = model();
    let sents: Vec<Vec<u32>> = (0..6).map(|i| ids(&vocab, 2 + i * 2, 10 + i as u64)).collect();
    let refs: Vec<&[u32]> = sents.iter().map(Vec::as_slice).collect();
    let (x, xm) = pad_batch(&refs);
    let base = m.encode(&x.view(), &xm.view(), false, 0).unwrap().pooled;
    let mut order: Vec<usize> = (0..6).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let perm: Vec<&[u32]> = order.iter().map(|&i| refs[i]).collect();
    let (y, ym) = pad_batch(&perm);
    let out = m.encode(&y.view(), &ym.view(), false, 0).unwrap().pooled;
    for (r, &i) in order.iter().enumerate() {
        let diff = (&out.row(r) - &base.row(i)).mapv(f32::abs).fold(0.0f32, |x, &y| x.max(y));
        assert!(diff <= 1e-6);
    }
}

#[test]
fn pooling_ignores_row_order_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let h = Array2::from_shape_simple_fn((n, 16), || rng.gen_range(-3.0f32..3.0));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let permuted = h.select(ndarray::Axis(0), &order);
        assert_eq!(mean_pool(&h.view()), mean_pool(&permuted.view()));
    }
}

#[test]
fn all_pad_row_is_rejected() {
    let (m, _) = model();
    let x = Array2::<u32>::zeros((2, 3));
    let mut mask = Array2::<u8>::zeros((2, 3));
    mask[[0, 0]] = 1;
    assert!(matches!(
        m.encode(&x.view(), &mask.view(), false, 0),
        Err(ems_core::EmsError::InvalidInput(_))
    ));
}
