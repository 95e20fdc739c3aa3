//! Evaluation on frozen embeddings: export, P@1 retrieval, margin-based
//! bitext mining and zero-shot classification probes.
//!
//! Inference uses only the encoder and mean pooling; neither training head
//! takes part.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::corpus::{encode_sentence, normalize, pad_batch, Vocabulary, MAX_TOKENS};
use crate::encoder::{derive_seed, Linear};
use crate::error::{EmsError, Result};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{log_softmax_rows, ParamStore};

const EMB_MAGIC: &str = "EMSEMB 1";

/// Sentence embeddings of one language, one row per sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub vectors: Array2<f32>,
    pub labels: Vec<String>,
    pub lang: String,
}

impl EmbeddingMatrix {
    pub fn new(vectors: Array2<f32>, labels: Vec<String>, lang: impl Into<String>) -> Result<Self> {
        let lang = lang.into();
        if labels.len() != vectors.nrows() {
            return Err(EmsError::InvalidInput(format!(
                "{} labels for {} embedding rows",
                labels.len(),
                vectors.nrows()
            )));
        }
        if let Some(i) = vectors.rows().into_iter().position(|r| r.iter().any(|x| !x.is_finite())) {
            return Err(EmsError::Numerical(format!("embedding row {i} is not finite")));
        }
        if lang.is_empty() || lang.contains(char::is_whitespace) {
            return Err(EmsError::InvalidInput(format!("bad language code {lang:?}")));
        }
        if labels.iter().any(|l| l.contains('\n')) {
            return Err(EmsError::InvalidInput("labels may not contain newlines".into()));
        }
        Ok(EmbeddingMatrix { vectors, labels, lang })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// The sidecar path holding one label per line.
    pub fn labels_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".labels");
        PathBuf::from(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (n, d) = self.vectors.dim();
        let mut bytes = format!("{EMB_MAGIC} {n} {d} {}\n", self.lang).into_bytes();
        bytes.reserve(4 * n * d);
        for &x in self.vectors.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        write_atomic(path, &bytes)?;
        let mut labels = String::new();
        for l in &self.labels {
            let _ = writeln!(labels, "{l}");
        }
        write_atomic(&Self::labels_path(path), labels.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| EmsError::io(path, e))?;
        let bad = |msg: &str| EmsError::format(path, msg);
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        let ["EMSEMB", "1", n, d, lang] = fields[..] else {
            return Err(bad("expected `EMSEMB 1 <N> <d> <lang>` header"));
        };
        let n: usize = n.parse().map_err(|_| bad("bad row count"))?;
        let d: usize = d.parse().map_err(|_| bad("bad dimension"))?;
        let data = &bytes[nl + 1..];
        if data.len() != 4 * n * d {
            return Err(bad("data length does not match header"));
        }
        let values: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let vectors = Array2::from_shape_vec((n, d), values).expect("length checked");
        let labels_path = Self::labels_path(path);
        let text = fs::read_to_string(&labels_path).map_err(|e| EmsError::io(&labels_path, e))?;
        let labels: Vec<String> = text.lines().map(str::to_string).collect();
        EmbeddingMatrix::new(vectors, labels, lang)
    }
}

/// Output of [`embed_corpus`].
#[derive(Debug, Clone)]
pub struct Embedded {
    /// Rows for the non-empty sentences; each label is the input index.
    pub matrix: EmbeddingMatrix,
    /// Input indices that were empty after normalization.
    pub skipped: Vec<usize>,
}

/// Embeds `sentences` with the encoder in inference mode.
pub fn embed_corpus(
    model: &Model<f32>,
    vocab: &Vocabulary,
    sentences: &[String],
    lang: &str,
    batch_size: usize,
) -> Result<Embedded> {
    if sentences.is_empty() {
        return Err(EmsError::InvalidInput("no sentences to embed".into()));
    }
    if batch_size == 0 {
        return Err(EmsError::Config("batch size must be positive".into()));
    }
    let max_len = MAX_TOKENS.min(model.cfg.encoder.max_positions);
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        let ids = encode_sentence(vocab, &normalize(s), max_len);
        if ids.is_empty() {
            skipped.push(i);
        } else {
            kept.push((i, ids));
        }
    }
    let mut vectors = Array2::zeros((kept.len(), model.d()));
    for (c, chunk) in kept.chunks(batch_size).enumerate() {
        let rows: Vec<&[u32]> = chunk.iter().map(|(_, ids)| ids.as_slice()).collect();
        let (ids, mask) = pad_batch(&rows);
        let out = model.encode(&ids.view(), &mask.view(), false, 0)?;
        let start = c * batch_size;
        vectors
            .slice_mut(s![start..start + chunk.len(), ..])
            .assign(&out.pooled);
    }
    let labels = kept.iter().map(|(i, _)| i.to_string()).collect();
    Ok(Embedded {
        matrix: EmbeddingMatrix::new(vectors, labels, lang)?,
        skipped,
    })
}

fn unit_rows(x: &ArrayView2<'_, f32>) -> Result<Array2<f64>> {
    let mut out = x.mapv(f64::from);
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(EmsError::Numerical(format!(
                "embedding row {i} has norm {norm}; cosine is undefined"
            )));
        }
        row /= norm;
    }
    Ok(out)
}

/// Pairwise cosine similarities, `a.len() × b.len()`.
pub fn cosine_matrix(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(EmsError::InvalidInput(format!(
            "embedding widths differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(unit_rows(&a.vectors.view())?.dot(&unit_rows(&b.vectors.view())?.t()))
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// For each query row, the candidate with the highest cosine.
pub fn top1(queries: &EmbeddingMatrix, candidates: &EmbeddingMatrix) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(EmsError::InvalidInput("no candidates to retrieve from".into()));
    }
    let sim = cosine_matrix(queries, candidates)?;
    Ok(sim
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()).unwrap())
        .collect())
}

/// Fraction of queries whose nearest candidate is the gold one.
///
/// `gold[i]` is the candidate index paired with query `i`.
pub fn retrieve_p1(queries: &EmbeddingMatrix, candidates: &EmbeddingMatrix, gold: &[usize]) -> Result<f64> {
    if gold.len() != queries.len() {
        return Err(EmsError::InvalidInput(format!(
            "gold covers {} queries, have {}",
            gold.len(),
            queries.len()
        )));
    }
    if queries.is_empty() {
        return Err(EmsError::InvalidInput("no queries".into()));
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= candidates.len()) {
        return Err(EmsError::InvalidInput(format!(
            "gold index {g} outside {} candidates",
            candidates.len()
        )));
    }
    let hits = top1(queries, candidates)?
        .iter()
        .zip(gold)
        .filter(|(p, g)| p == g)
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Turns `(src, tgt)` gold pairs into a per-query map for `n_queries` rows.
pub fn gold_map(pairs: &[(usize, usize)], n_queries: usize) -> Result<Vec<usize>> {
    let mut map = vec![None; n_queries];
    for &(q, c) in pairs {
        let slot = map.get_mut(q).ok_or_else(|| {
            EmsError::InvalidInput(format!("gold query index {q} outside {n_queries} rows"))
        })?;
        if slot.replace(c).is_some() {
            return Err(EmsError::InvalidInput(format!("query {q} has more than one gold entry")));
        }
    }
    map.into_iter()
        .enumerate()
        .map(|(q, c)| c.ok_or_else(|| EmsError::InvalidInput(format!("query {q} has no gold entry"))))
        .collect()
}

/// Mean of the A→B and B→A P@1 over gold pairs `(a index, b index)`.
pub fn bidirectional_p1(a: &EmbeddingMatrix, b: &EmbeddingMatrix, gold: &[(usize, usize)]) -> Result<f64> {
    let forward = retrieve_p1(a, b, &gold_map(gold, a.len())?)?;
    let reversed: Vec<(usize, usize)> = gold.iter().map(|&(x, y)| (y, x)).collect();
    let backward = retrieve_p1(b, a, &gold_map(&reversed, b.len())?)?;
    Ok((forward + backward) / 2.0)
}

pub fn read_gold(path: impl AsRef<Path>) -> Result<Vec<(usize, usize)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| EmsError::io(path, e))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: &str| EmsError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: msg.to_string(),
        };
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected src_index<TAB>tgt_index"))?;
        let a = a.parse().map_err(|_| parse_err("bad source index"))?;
        let b = b.parse().map_err(|_| parse_err("bad target index"))?;
        pairs.push((a, b));
    }
    Ok(pairs)
}

pub fn write_gold(path: impl AsRef<Path>, pairs: &[(usize, usize)]) -> Result<()> {
    let mut text = String::new();
    for (a, b) in pairs {
        let _ = writeln!(text, "{a}\t{b}");
    }
    write_atomic(path.as_ref(), text.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginKind {
    #[default]
    Ratio,
    Distance,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiningStrategy {
    Forward,
    Backward,
    #[default]
    Intersect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub k: usize,
    pub margin: MarginKind,
    pub strategy: MiningStrategy,
    pub threshold: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            k: 4,
            margin: MarginKind::Ratio,
            strategy: MiningStrategy::Intersect,
            threshold: f64::NEG_INFINITY,
        }
    }
}

/// Margin of a candidate pair given its cosine and the cosines from each
/// side to that side's k nearest neighbours in the other set.
pub fn margin_score(cos_xy: f64, knn_x: &[f64], knn_y: &[f64], kind: MarginKind) -> Result<f64> {
    if knn_x.is_empty() || knn_y.is_empty() {
        return Err(EmsError::InvalidInput("neighbour lists must be non-empty".into()));
    }
    let denom = knn_x.iter().sum::<f64>() / (2 * knn_x.len()) as f64
        + knn_y.iter().sum::<f64>() / (2 * knn_y.len()) as f64;
    match kind {
        MarginKind::Absolute => Ok(cos_xy),
        MarginKind::Distance => Ok(cos_xy - denom),
        MarginKind::Ratio if denom == 0.0 => Err(EmsError::Numerical(
            "degenerate geometry: neighbourhood similarity is zero".into(),
        )),
        MarginKind::Ratio => Ok(cos_xy / denom),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningResult {
    /// `(src index, tgt index, score)`, highest score first.
    pub pairs: Vec<(usize, usize, f64)>,
    pub threshold: f64,
}

impl MiningResult {
    pub fn to_tsv(&self) -> String {
        let mut text = String::new();
        for (a, b, score) in &self.pairs {
            let _ = writeln!(text, "{score}\t{a}\t{b}");
        }
        text
    }
}

/// Mean cosine to the k nearest neighbours of each row of `sim`.
fn knn_means(sim: &ArrayView2<'_, f64>, k: usize) -> Vec<Vec<f64>> {
    let k = k.min(sim.ncols());
    sim.rows()
        .into_iter()
        .map(|row| {
            let mut v = row.to_vec();
            v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
            v.truncate(k);
            v.sort_by(|a, b| b.total_cmp(a));
            v
        })
        .collect()
}

/// Margin-scored bitext mining between two embedding sets.
pub fn mine_bitext(a: &EmbeddingMatrix, b: &EmbeddingMatrix, cfg: &MiningConfig) -> Result<MiningResult> {
    if cfg.k == 0 {
        return Err(EmsError::Config("k must be at least 1".into()));
    }
    if a.is_empty() || b.is_empty() {
        return Ok(MiningResult {
            pairs: Vec::new(),
            threshold: cfg.threshold,
        });
    }
    let sim = cosine_matrix(a, b)?;
    let knn_a = knn_means(&sim.view(), cfg.k);
    let knn_b = knn_means(&sim.t(), cfg.k);
    let mut margin = Array2::zeros(sim.dim());
    for ((i, j), m) in margin.indexed_iter_mut() {
        *m = margin_score(sim[[i, j]], &knn_a[i], &knn_b[j], cfg.margin)?;
    }
    let forward: Vec<usize> = margin
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()).unwrap())
        .collect();
    let backward: Vec<usize> = margin
        .columns()
        .into_iter()
        .map(|c| argmax(c.iter().copied()).unwrap())
        .collect();
    let mut pairs: Vec<(usize, usize, f64)> = match cfg.strategy {
        MiningStrategy::Forward => forward.iter().enumerate().map(|(i, &j)| (i, j)).collect(),
        MiningStrategy::Backward => backward.iter().enumerate().map(|(j, &i)| (i, j)).collect(),
        MiningStrategy::Intersect => forward
            .iter()
            .enumerate()
            .filter(|&(i, &j)| backward[j] == i)
            .map(|(i, &j)| (i, j))
            .collect::<Vec<_>>(),
    }
    .into_iter()
    .map(|(i, j)| (i, j, margin[[i, j]]))
    .filter(|&(_, _, score)| score >= cfg.threshold)
    .collect();
    pairs.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    Ok(MiningResult {
        pairs,
        threshold: cfg.threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set precision, recall and F1 of mined pairs against gold pairs.
/// Precision of an empty result is reported as 0.
pub fn mining_f1(result: &MiningResult, gold: &[(usize, usize)]) -> Result<Prf> {
    use std::collections::BTreeSet;
    if gold.is_empty() {
        return Err(EmsError::InvalidInput("gold pair set is empty".into()));
    }
    let gold: BTreeSet<(usize, usize)> = gold.iter().copied().collect();
    let found: BTreeSet<(usize, usize)> = result.pairs.iter().map(|&(a, b, _)| (a, b)).collect();
    let tp = found.intersection(&gold).count() as f64;
    let precision = if found.is_empty() { 0.0 } else { tp / found.len() as f64 };
    let recall = tp / gold.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf {
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub n_classes: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: vec![128],
            epochs: 100,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            n_classes: 2,
        }
    }
}

/// MLP classifier over frozen sentence embeddings.
#[derive(Debug, Clone)]
pub struct Probe {
    pub cfg: ProbeConfig,
    store: ParamStore<f64>,
    layers: Vec<Linear>,
}

impl Probe {
    /// Pre-activations of every layer; the last entry holds the logits.
    fn forward(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut outs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { x.clone() } else { outs[l - 1].mapv(|v| v.max(0.0)) };
            outs.push(layer.forward(&self.store, &input.view()));
        }
        outs
    }

    pub fn predict(&self, emb: &EmbeddingMatrix) -> Vec<usize> {
        let x = emb.vectors.mapv(f64::from);
        let logits = self.forward(&x).pop().unwrap();
        logits
            .rows()
            .into_iter()
            .map(|r| argmax(r.iter().copied()).unwrap())
            .collect()
    }
}

fn check_labels(emb: &EmbeddingMatrix, labels: &[usize], n_classes: usize) -> Result<()> {
    if labels.len() != emb.len() {
        return Err(EmsError::InvalidInput(format!(
            "{} labels for {} embeddings",
            labels.len(),
            emb.len()
        )));
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= n_classes) {
        return Err(EmsError::InvalidInput(format!("label {c} outside {n_classes} classes")));
    }
    Ok(())
}

/// Trains a probe on `emb` with softmax cross-entropy and Adam.
pub fn train_probe(emb: &EmbeddingMatrix, labels: &[usize], cfg: &ProbeConfig) -> Result<Probe> {
    if cfg.n_classes < 2 {
        return Err(EmsError::Config(format!("a probe needs at least 2 classes, got {}", cfg.n_classes)));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || cfg.hidden.contains(&0) {
        return Err(EmsError::Config("probe batch size, epochs and widths must be positive".into()));
    }
    check_labels(emb, labels, cfg.n_classes)?;
    if labels.iter().all(|&c| c == labels[0]) {
        return Err(EmsError::Config("probe training set holds a single class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f64>::default();
    let mut widths = vec![emb.dim()];
    widths.extend(&cfg.hidden);
    widths.push(cfg.n_classes);
    let layers: Vec<Linear> = widths
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            // He-style scale keeps ReLU activations at unit variance
            let std = (2.0 / w[0] as f64).sqrt();
            Linear::new(&mut store, &format!("probe.l{l}"), w[1], w[0], true, std, &mut rng)
        })
        .collect();
    let mut probe = Probe {
        cfg: cfg.clone(),
        store,
        layers,
    };
    let mut adam = Adam::new(&probe.store, AdamConfig::default());
    let mut grads = probe.store.zeros_like();
    let x = emb.vectors.mapv(f64::from);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let outs = probe.forward(&xb);
            let n = chunk.len() as f64;
            let mut delta = log_softmax_rows(outs.last().unwrap()).mapv(f64::exp);
            for (r, &i) in chunk.iter().enumerate() {
                delta[[r, labels[i]]] -= 1.0;
            }
            delta /= n;
            grads.zero();
            for l in (0..probe.layers.len()).rev() {
                let input = if l == 0 { xb.clone() } else { outs[l - 1].mapv(|v| v.max(0.0)) };
                let dx = probe.layers[l].backward(&probe.store, &mut grads, &input.view(), &delta.view());
                if l > 0 {
                    delta = dx;
                    delta.zip_mut_with(&outs[l - 1], |g, &z| {
                        if z <= 0.0 {
                            *g = 0.0
                        }
                    });
                }
            }
            adam.step(&mut probe.store, &grads, cfg.lr);
        }
    }
    Ok(probe)
}

/// Classification accuracy of `probe` on `emb`.
pub fn eval_probe(probe: &Probe, emb: &EmbeddingMatrix, labels: &[usize]) -> Result<f64> {
    check_labels(emb, labels, probe.cfg.n_classes)?;
    if labels.is_empty() {
        return Err(EmsError::InvalidInput("no test examples".into()));
    }
    let hits = probe
        .predict(emb)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Reads one integer class label per line.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| EmsError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse().map_err(|_| EmsError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: format!("bad class label {l:?}"),
            })
        })
        .collect()
}

/// Stacks row vectors into a matrix; used by tests and tools.
pub fn stack_rows(rows: &[Array1<f32>]) -> Array2<f32> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    fn emb(v: Array2<f32>) -> EmbeddingMatrix {
        let labels = (0..v.nrows()).map(|i| i.to_string()).collect();
        EmbeddingMatrix::new(v, labels, "xx").unwrap()
    }

    fn random(n: usize, d: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        Array2::from_shape_simple_fn((n, d), || normal.sample(&mut rng))
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let q = emb(random(20, 8, 1));
        let gold: Vec<usize> = (0..20).collect();
        assert_eq!(retrieve_p1(&q, &q, &gold).unwrap(), 1.0);
    }

    #[test]
    fn duplicated_gold_among_orthogonal_distractors() {
        let q = emb(array![[1.0, 0.0, 0.0, 0.0]]);
        let c = emb(array![[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0]]);
        assert_eq!(retrieve_p1(&q, &c, &[2]).unwrap(), 1.0);
    }

    #[test]
    fn two_of_three_hits() {
        let q = emb(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let c = emb(array![[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]);
        let p1 = retrieve_p1(&q, &c, &[0, 1, 2]).unwrap();
        assert!((p1 - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let q = emb(array![[1.0, 0.0]]);
        let c = emb(array![[0.0, 1.0], [2.0, 0.0], [1.0, 0.0]]);
        assert_eq!(top1(&q, &c).unwrap(), vec![1]);
    }

    #[test]
    fn size_mismatch_is_invalid_input() {
        let q = emb(random(3, 4, 1));
        let c = emb(random(3, 5, 2));
        assert!(matches!(retrieve_p1(&q, &c, &[0, 1, 2]), Err(EmsError::InvalidInput(_))));
        let c = emb(random(3, 4, 2));
        assert!(matches!(retrieve_p1(&q, &c, &[0, 1]), Err(EmsError::InvalidInput(_))));
    }

    #[test]
    fn bidirectional_mean_and_symmetry() {
        let a = emb(random(10, 6, 3));
        let b = emb(random(10, 6, 4));
        let gold: Vec<(usize, usize)> = (0..10).map(|i| (i, (i * 3) % 10)).collect();
        let ab = bidirectional_p1(&a, &b, &gold).unwrap();
        let rev: Vec<(usize, usize)> = gold.iter().map(|&(x, y)| (y, x)).collect();
        assert_eq!(ab, bidirectional_p1(&b, &a, &rev).unwrap());
        let id: Vec<(usize, usize)> = (0..10).map(|i| (i, i)).collect();
        assert_eq!(bidirectional_p1(&a, &a, &id).unwrap(), 1.0);

        // A→B finds both golds; B→A sends both queries to A row 0
        let a = emb(array![[1.0, 0.0], [0.8, 0.6]]);
        let b = emb(array![[1.0, 0.0], [0.0, 1.0]]);
        let gold = [(0, 0), (1, 1)];
        let fwd = retrieve_p1(&a, &b, &[0, 1]).unwrap();
        let bwd = retrieve_p1(&b, &a, &[0, 1]).unwrap();
        assert_eq!((fwd, bwd), (0.5, 1.0));
        assert_eq!(bidirectional_p1(&a, &b, &gold).unwrap(), 0.75);
    }

    #[test]
    fn p1_is_scale_invariant() {
        let a = random(40, 8, 5);
        let b = random(40, 8, 6);
        let gold: Vec<usize> = (0..40).collect();
        let base = retrieve_p1(&emb(a.clone()), &emb(b.clone()), &gold).unwrap();
        for s in [0.125f32, 3.0, 1024.0] {
            let scaled = retrieve_p1(&emb(&a * s), &emb(&b * s), &gold).unwrap();
            assert_eq!(base, scaled);
        }
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin_score(1.0, &[1.0; 4], &[1.0; 4], MarginKind::Ratio).unwrap(), 1.0);
        let s = margin_score(0.9, &[0.45; 4], &[0.45; 4], MarginKind::Ratio).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
        let s = margin_score(0.9, &[0.45; 4], &[0.45; 4], MarginKind::Distance).unwrap();
        assert!((s - 0.45).abs() < 1e-12);
        assert!(matches!(
            margin_score(0.3, &[0.5, -0.5], &[0.0, 0.0], MarginKind::Ratio),
            Err(EmsError::Numerical(_))
        ));
    }

    #[test]
    fn identical_sets_self_align() {
        let a = emb(random(30, 8, 7));
        let r = mine_bitext(&a, &a, &MiningConfig::default()).unwrap();
        let mut pairs: Vec<(usize, usize)> = r.pairs.iter().map(|&(i, j, _)| (i, j)).collect();
        pairs.sort();
        assert_eq!(pairs, (0..30).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(r.pairs.windows(2).all(|w| w[0].2 >= w[1].2));
    }

    #[test]
    fn all_identical_candidates_score_one() {
        let a = emb(Array2::from_elem((5, 3), 1.0));
        let r = mine_bitext(&a, &a, &MiningConfig::default()).unwrap();
        assert!(r.pairs.iter().all(|p| (p.2 - 1.0).abs() < 1e-12));
    }

    #[test]
    fn threshold_above_all_scores_is_empty() {
        let a = emb(random(20, 8, 8));
        let b = emb(random(25, 8, 9));
        let cfg = MiningConfig {
            threshold: 1e9,
            ..MiningConfig::default()
        };
        assert!(mine_bitext(&a, &b, &cfg).unwrap().pairs.is_empty());
    }

    #[test]
    fn f1_examples() {
        let gold = [(0, 0), (1, 1), (2, 2), (3, 3)];
        let all = MiningResult {
            pairs: gold.iter().map(|&(a, b)| (a, b, 1.0)).collect(),
            threshold: 0.0,
        };
        let prf = mining_f1(&all, &gold).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
        let empty = MiningResult {
            pairs: vec![],
            threshold: 0.0,
        };
        let prf = mining_f1(&empty, &gold).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.0, 0.0, 0.0));
        let half = MiningResult {
            pairs: vec![(0, 0, 1.0), (1, 1, 1.0)],
            threshold: 0.0,
        };
        let prf = mining_f1(&half, &gold).unwrap();
        assert_eq!((prf.precision, prf.recall), (1.0, 0.5));
        assert!((prf.f1 - 0.6667).abs() < 1e-4);
        assert!(mining_f1(&half, &[]).is_err());
    }

    #[test]
    fn embedding_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb");
        let e = EmbeddingMatrix::new(random(7, 5, 10), (0..7).map(|i| format!("s{i}")).collect(), "de").unwrap();
        e.save(&path).unwrap();
        assert_eq!(EmbeddingMatrix::load(&path).unwrap(), e);
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"EMSEMB 1 7 5 de\n"));
        assert_eq!(bytes.len(), 16 + 7 * 5 * 4);
    }

    #[test]
    fn non_finite_rows_rejected() {
        let mut v = random(3, 2, 1);
        v[[1, 0]] = f32::NAN;
        assert!(EmbeddingMatrix::new(v, vec!["a".into(), "b".into(), "c".into()], "xx").is_err());
    }

    fn blobs(n: usize, seed: u64) -> (EmbeddingMatrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.5).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { 2.0 } else { -2.0 };
            rows.push(Array1::from_shape_fn(6, |_| centre + normal.sample(&mut rng)));
            labels.push(c);
        }
        (emb(stack_rows(&rows)), labels)
    }

    #[test]
    fn probe_separates_blobs() {
        let (e, y) = blobs(200, 11);
        let cfg = ProbeConfig {
            epochs: 20,
            ..ProbeConfig::default()
        };
        let before = e.clone();
        let probe = train_probe(&e, &y, &cfg).unwrap();
        assert!(eval_probe(&probe, &e, &y).unwrap() >= 0.95);
        assert_eq!(e, before);
    }

    #[test]
    fn probe_is_deterministic() {
        let (e, y) = blobs(64, 12);
        let cfg = ProbeConfig {
            epochs: 3,
            ..ProbeConfig::default()
        };
        let a = train_probe(&e, &y, &cfg).unwrap();
        let b = train_probe(&e, &y, &cfg).unwrap();
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let c = 4;
        let n = 800;
        let e = emb(random(n, 8, 13));
        let mut y: Vec<usize> = (0..n).map(|i| i % c).collect();
        let cfg = ProbeConfig {
            n_classes: c,
            epochs: 10,
            ..ProbeConfig::default()
        };
        let probe = train_probe(&e, &y, &cfg).unwrap();
        y.shuffle(&mut ChaCha8Rng::seed_from_u64(14));
        let acc = eval_probe(&probe, &e, &y).unwrap();
        assert!((acc - 0.25).abs() <= 0.1, "accuracy {acc}");
    }

    #[test]
    fn single_class_probe_is_config_error() {
        let e = emb(random(10, 4, 15));
        let y = vec![1; 10];
        assert!(matches!(
            train_probe(&e, &y, &ProbeConfig::default()),
            Err(EmsError::Config(_))
        ));
    }
}
