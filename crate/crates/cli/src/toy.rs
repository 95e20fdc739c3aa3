//! Synthetic parallel corpus whose cross-lingual alignment is learnable.
//!
//! Every language `l<i>` has its own alphabet `l<i>_tok_0 .. l<i>_tok_<V-1>`.
//! A pair renders one random index sequence in two alphabets, so the
//! lexicon between any two languages is the identity on indices.

use std::collections::HashSet;

use ems_core::corpus::{ParallelCorpus, SentencePair};
use ems_core::{EmsError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MIN_LEN: usize = 3;
pub const MAX_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub langs: usize,
    pub pairs: usize,
    pub vocab_per_lang: usize,
    pub heldout: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    pub train: ParallelCorpus,
    pub heldout: ParallelCorpus,
}

pub fn lang_code(i: usize) -> String {
    format!("l{i}")
}

fn render(lang: usize, seq: &[usize]) -> String {
    seq.iter()
        .map(|t| format!("l{lang}_tok_{t}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn gen_toy(cfg: &ToyConfig) -> Result<ToyData> {
    if cfg.langs < 2 {
        return Err(EmsError::Config(format!("need at least 2 languages, got {}", cfg.langs)));
    }
    if cfg.vocab_per_lang < 2 {
        return Err(EmsError::Config("vocab_per_lang must be at least 2".into()));
    }
    if cfg.pairs == 0 {
        return Err(EmsError::Config("pairs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut draw = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<SentencePair>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * (n + 10) {
                return Err(EmsError::Config(
                    "alphabet too small to draw that many distinct sentences".into(),
                ));
            }
            let len = rng.gen_range(MIN_LEN..=MAX_LEN);
            let seq: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_per_lang)).collect();
            let src = rng.gen_range(0..cfg.langs);
            let tgt = (src + rng.gen_range(1..cfg.langs)) % cfg.langs;
            // every underlying sequence is used once, which keeps the splits disjoint
            if !seen.insert(seq.clone()) {
                continue;
            }
            out.push(SentencePair::new(
                lang_code(src),
                lang_code(tgt),
                render(src, &seq),
                render(tgt, &seq),
            )?);
        }
        Ok(out)
    };
    let train = draw(cfg.pairs, &mut rng)?;
    let heldout = draw(cfg.heldout, &mut rng)?;
    Ok(ToyData {
        train: ParallelCorpus::new(train),
        heldout: ParallelCorpus::new(heldout),
    })
}
