//! Parallel-text ingestion, subword vocabulary, sentence encoding and batching.
//!
//! The vocabulary keeps every id in one space: `<pad>` (0), `<unk>` (1), one
//! `<2xx>` control token per corpus language, then content units. Control
//! tokens are never emitted by [`encode_sentence`]; the language embedding
//! layer of the reconstruction head is their only consumer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EmsError, Result};

/// Maximum encoded length of a sentence.
pub const MAX_TOKENS: usize = 120;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

const VOCAB_MAGIC: &str = "EMSVOCAB";
const VOCAB_VERSION: u32 = 1;

/// Lowercases, collapses internal whitespace runs and trims.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Name of the control token for a language code, e.g. `<2en>`.
pub fn lang_token(code: &str) -> String {
    format!("<2{code}>")
}

fn is_lang_token(token: &str) -> bool {
    token.len() > 3 && token.starts_with("<2") && token.ends_with('>')
}

fn valid_lang_code(code: &str) -> bool {
    !code.is_empty() && !code.contains(|c: char| c.is_whitespace() || c == '<' || c == '>')
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src_text: String,
    pub tgt_text: String,
}

impl SentencePair {
    pub fn new(
        src_lang: impl Into<String>,
        tgt_lang: impl Into<String>,
        src_text: impl Into<String>,
        tgt_text: impl Into<String>,
    ) -> Result<Self> {
        let pair = SentencePair {
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
            src_text: src_text.into(),
            tgt_text: tgt_text.into(),
        };
        pair.check().map_err(EmsError::InvalidInput)?;
        Ok(pair)
    }

    fn check(&self) -> std::result::Result<(), String> {
        for code in [&self.src_lang, &self.tgt_lang] {
            if !valid_lang_code(code) {
                return Err(format!("invalid language code {code:?}"));
            }
        }
        if self.src_lang == self.tgt_lang {
            return Err(format!(
                "source and target language are both {:?}",
                self.src_lang
            ));
        }
        if normalize(&self.src_text).is_empty() {
            return Err("source text is empty".into());
        }
        if normalize(&self.tgt_text).is_empty() {
            return Err("target text is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
    language_set: BTreeSet<String>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>) -> Self {
        let language_set = pairs
            .iter()
            .flat_map(|p| [p.src_lang.clone(), p.tgt_lang.clone()])
            .collect();
        ParallelCorpus {
            pairs,
            language_set,
        }
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn language_set(&self) -> &BTreeSet<String> {
        &self.language_set
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                p.src_lang, p.tgt_lang, p.src_text, p.tgt_text
            );
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| EmsError::io(path, e))
    }
}

/// Reads a 4-column TSV corpus. Blank and `#`-prefixed lines are skipped.
pub fn load_parallel_tsv(path: impl AsRef<Path>) -> Result<ParallelCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| EmsError::io(path, e))?;
    let mut pairs = Vec::new();
    for (idx, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| EmsError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(format!(
                "expected 4 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let pair = SentencePair {
            src_lang: fields[0].to_string(),
            tgt_lang: fields[1].to_string(),
            src_text: fields[2].to_string(),
            tgt_text: fields[3].to_string(),
        };
        pair.check().map_err(parse_err)?;
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(EmsError::EmptyCorpus(path.to_path_buf()));
    }
    Ok(ParallelCorpus::new(pairs))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    lang_token_ids: BTreeMap<String, u32>,
    first_content_id: u32,
    max_unit_chars: usize,
}

impl Vocabulary {
    fn from_tokens(id_to_token: Vec<String>) -> std::result::Result<Self, String> {
        if id_to_token.len() < 2
            || id_to_token[PAD_ID as usize] != PAD_TOKEN
            || id_to_token[UNK_ID as usize] != UNK_TOKEN
        {
            return Err("first two entries must be <pad> and <unk>".into());
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        let mut lang_token_ids = BTreeMap::new();
        let mut first_content_id = 2u32;
        let mut max_unit_chars = 1;
        for (id, token) in id_to_token.iter().enumerate() {
            let id = id as u32;
            if token.is_empty() || token.contains(char::is_whitespace) {
                return Err(format!("token {id} is empty or contains whitespace"));
            }
            if token_to_id.insert(token.clone(), id).is_some() {
                return Err(format!("duplicate token {token:?}"));
            }
            if id < 2 {
                continue;
            }
            if is_lang_token(token) {
                if id != first_content_id {
                    return Err(format!("language token {token:?} after content units"));
                }
                let code = &token[2..token.len() - 1];
                lang_token_ids.insert(code.to_string(), id);
                first_content_id += 1;
            } else {
                max_unit_chars = max_unit_chars.max(token.chars().count());
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            lang_token_ids,
            first_content_id,
            max_unit_chars,
        })
    }

    /// Total size of the id space.
    pub fn d_vcb(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn lang_id(&self, code: &str) -> Option<u32> {
        self.lang_token_ids.get(code).copied()
    }

    pub fn lang_token_ids(&self) -> &BTreeMap<String, u32> {
        &self.lang_token_ids
    }

    pub fn is_lang_id(&self, id: u32) -> bool {
        id >= 2 && id < self.first_content_id
    }

    /// Content units (and `<unk>`) are the only ids an encoded sentence may hold.
    pub fn is_content_id(&self, id: u32) -> bool {
        id == UNK_ID || (id >= self.first_content_id && (id as usize) < self.d_vcb())
    }

    pub fn first_content_id(&self) -> u32 {
        self.first_content_id
    }

    fn content_id(&self, unit: &str) -> Option<u32> {
        self.id(unit).filter(|&id| id >= self.first_content_id)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{VOCAB_MAGIC} {VOCAB_VERSION} {}\n", self.d_vcb());
        for token in &self.id_to_token {
            out.push_str(token);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| EmsError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| EmsError::io(path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| EmsError::format(path, "missing header"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        let expected = match fields.as_slice() {
            [magic, version, n] if *magic == VOCAB_MAGIC && *version == "1" => n
                .parse::<usize>()
                .map_err(|_| EmsError::format(path, "bad vocabulary size in header"))?,
            _ => return Err(EmsError::format(path, format!("bad header {header:?}"))),
        };
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        if tokens.len() != expected {
            return Err(EmsError::format(
                path,
                format!("header declares {expected} tokens, found {}", tokens.len()),
            ));
        }
        Vocabulary::from_tokens(tokens).map_err(|msg| EmsError::format(path, msg))
    }
}

fn by_count_then_lex(counts: HashMap<String, usize>) -> Vec<String> {
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().map(|(unit, _)| unit).collect()
}

/// Builds the vocabulary: specials, language tokens, then content units.
///
/// Content units are whole words ranked by frequency, followed by single
/// characters that serve as the fallback alphabet for greedy longest-match
/// segmentation. Up to half of the content budget is reserved for the
/// alphabet; any budget words leave unused goes to characters as well.
pub fn build_vocab(corpus: &ParallelCorpus, target_size: usize) -> Result<Vocabulary> {
    let n_langs = corpus.language_set().len();
    let min_size = 2 + n_langs + 1;
    if target_size < min_size {
        return Err(EmsError::Config(format!(
            "vocabulary size {target_size} is below the minimum {min_size} \
             (2 specials + {n_langs} language tokens + 1 content unit)"
        )));
    }

    let mut word_counts: HashMap<String, usize> = HashMap::new();
    let mut char_counts: HashMap<String, usize> = HashMap::new();
    for pair in corpus.pairs() {
        for text in [&pair.src_text, &pair.tgt_text] {
            for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
                if word == PAD_TOKEN || word == UNK_TOKEN || is_lang_token(word) {
                    continue;
                }
                *word_counts.entry(word.to_string()).or_default() += 1;
                for c in word.chars() {
                    *char_counts.entry(c.to_string()).or_default() += 1;
                }
            }
        }
    }

    let words = by_count_then_lex(word_counts);
    let chars = by_count_then_lex(char_counts);
    let budget = target_size - 2 - n_langs;
    let char_reserve = chars.len().min(budget / 2);
    let n_words = words.len().min(budget - char_reserve);

    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(corpus.language_set().iter().map(|l| lang_token(l)));
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for w in words.into_iter().take(n_words) {
        seen.insert(w.clone());
        tokens.push(w);
    }
    for c in chars {
        if tokens.len() >= target_size {
            break;
        }
        if !seen.contains(&c) {
            tokens.push(c);
        }
    }
    Vocabulary::from_tokens(tokens).map_err(EmsError::InvalidInput)
}

/// Segments normalized text into content ids, truncating to `max_len`.
///
/// Each whitespace-separated word is split by greedy longest match against
/// the content units; a character no unit covers becomes `<unk>`.
pub fn encode_sentence(vocab: &Vocabulary, text: &str, max_len: usize) -> Vec<u32> {
    let mut ids = Vec::new();
    'words: for word in text.split_whitespace() {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let byte_at = |i: usize| chars.get(i).map_or(word.len(), |&(b, _)| b);
        let mut start = 0;
        while start < chars.len() {
            if ids.len() >= max_len {
                break 'words;
            }
            let longest = (chars.len() - start).min(vocab.max_unit_chars);
            let found = (1..=longest).rev().find_map(|n| {
                vocab
                    .content_id(&word[byte_at(start)..byte_at(start + n)])
                    .map(|id| (id, n))
            });
            match found {
                Some((id, n)) => {
                    ids.push(id);
                    start += n;
                }
                None => {
                    ids.push(UNK_ID);
                    start += 1;
                }
            }
        }
    }
    ids
}

/// A padded batch of sentence pairs. Rows are left-aligned; mask 1 marks a real token.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src_ids: Array2<u32>,
    pub tgt_ids: Array2<u32>,
    pub src_mask: Array2<u8>,
    pub tgt_mask: Array2<u8>,
    pub src_lang_ids: Vec<u32>,
    pub tgt_lang_ids: Vec<u32>,
    /// Corpus index of each row.
    pub pair_indices: Vec<usize>,
}

/// One encoded sentence pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    pub src_lang: u32,
    pub tgt_lang: u32,
}

/// Left-aligns `rows` into a padded id matrix and its mask.
pub fn pad_batch(rows: &[&[u32]]) -> (Array2<u32>, Array2<u8>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut ids = Array2::zeros((rows.len(), width));
    let mut mask = Array2::zeros((rows.len(), width));
    for (b, row) in rows.iter().enumerate() {
        for (i, &id) in row.iter().enumerate() {
            ids[[b, i]] = id;
            mask[[b, i]] = 1;
        }
    }
    (ids, mask)
}

impl Batch {
    pub fn from_pairs(pairs: &[&EncodedPair], pair_indices: Vec<usize>) -> Self {
        let src: Vec<&[u32]> = pairs.iter().map(|p| p.src.as_slice()).collect();
        let tgt: Vec<&[u32]> = pairs.iter().map(|p| p.tgt.as_slice()).collect();
        let (src_ids, src_mask) = pad_batch(&src);
        let (tgt_ids, tgt_mask) = pad_batch(&tgt);
        Batch {
            src_ids,
            tgt_ids,
            src_mask,
            tgt_mask,
            src_lang_ids: pairs.iter().map(|p| p.src_lang).collect(),
            tgt_lang_ids: pairs.iter().map(|p| p.tgt_lang).collect(),
            pair_indices,
        }
    }

    pub fn size(&self) -> usize {
        self.src_lang_ids.len()
    }

    /// Same batch with source and target sides exchanged.
    pub fn swapped(&self) -> Self {
        Batch {
            src_ids: self.tgt_ids.clone(),
            tgt_ids: self.src_ids.clone(),
            src_mask: self.tgt_mask.clone(),
            tgt_mask: self.src_mask.clone(),
            src_lang_ids: self.tgt_lang_ids.clone(),
            tgt_lang_ids: self.src_lang_ids.clone(),
            pair_indices: self.pair_indices.clone(),
        }
    }
}

/// Unpadded ids of row `b`.
pub fn row_tokens(ids: &Array2<u32>, mask: &Array2<u8>, b: usize) -> Vec<u32> {
    ids.row(b)
        .iter()
        .zip(mask.row(b))
        .filter(|(_, &m)| m == 1)
        .map(|(&id, _)| id)
        .collect()
}

/// A corpus encoded once, from which shuffled batch streams are drawn.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pairs: Vec<EncodedPair>,
}

impl EncodedCorpus {
    pub fn new(corpus: &ParallelCorpus, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(EmsError::InvalidInput("corpus is empty".into()));
        }
        let lang = |code: &str| {
            vocab.lang_id(code).ok_or_else(|| {
                EmsError::InvalidInput(format!("vocabulary has no token for language {code:?}"))
            })
        };
        let pairs = corpus
            .pairs()
            .iter()
            .map(|p| {
                Ok(EncodedPair {
                    src: encode_sentence(vocab, &normalize(&p.src_text), max_len),
                    tgt: encode_sentence(vocab, &normalize(&p.tgt_text), max_len),
                    src_lang: lang(&p.src_lang)?,
                    tgt_lang: lang(&p.tgt_lang)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedCorpus { pairs })
    }

    pub fn pairs(&self) -> &[EncodedPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_batches(&self, batch_size: usize) -> usize {
        self.pairs.len().div_ceil(batch_size)
    }

    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
        if batch_size < 2 {
            return Err(EmsError::Config(format!(
                "batch size {batch_size} leaves no in-batch negatives; need at least 2"
            )));
        }
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(order
            .chunks(batch_size)
            .map(|chunk| {
                let rows: Vec<&EncodedPair> = chunk.iter().map(|&i| &self.pairs[i]).collect();
                Batch::from_pairs(&rows, chunk.to_vec())
            })
            .collect())
    }
}

/// Shuffles and batches `corpus` with the default 120-token truncation.
pub fn make_batches(
    corpus: &ParallelCorpus,
    vocab: &Vocabulary,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(EmsError::Config(format!(
            "batch size {batch_size} leaves no in-batch negatives; need at least 2"
        )));
    }
    EncodedCorpus::new(corpus, vocab, MAX_TOKENS)?.batches(batch_size, seed)
}
