#![allow(dead_code)]

use ems_core::corpus::{build_vocab, ParallelCorpus, SentencePair, Vocabulary};
use ems_core::encoder::EncoderConfig;
use ems_core::model::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairs whose sides share a token index sequence rendered in two alphabets.
pub fn toy_corpus(n_pairs: usize, vocab_per_lang: usize, seed: u64) -> ParallelCorpus {
    let langs = ["aa", "bb", "cc"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n_pairs)
        .map(|_| {
            let s = rng.gen_range(0..langs.len());
            let t = (s + rng.gen_range(1..langs.len())) % langs.len();
            let len = rng.gen_range(3..=8);
            let idx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab_per_lang)).collect();
            let render = |l: &str| idx.iter().map(|i| format!("{l}w{i}")).collect::<Vec<_>>().join(" ");
            SentencePair::new(langs[s], langs[t], render(langs[s]), render(langs[t])).unwrap()
        })
        .collect();
    ParallelCorpus::new(pairs)
}

pub fn toy_vocab(corpus: &ParallelCorpus) -> Vocabulary {
    build_vocab(corpus, 200).unwrap()
}

/// A small model that trains in well under a second per step.
pub fn small_config(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d: 16,
            d_ff: 32,
            dropout_hidden: 0.1,
            dropout_attn: 0.1,
            max_positions: 120,
        },
        d_la: 8,
        d_cntrs: 8,
        ..ModelConfig::for_vocab(vocab)
    }
}
