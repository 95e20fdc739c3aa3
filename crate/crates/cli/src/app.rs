//! Command-line front end over the `ems-core` pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ems_core::corpus::{build_vocab, load_parallel_tsv, Vocabulary};
use ems_core::evalkit::{
    bidirectional_p1, embed_corpus, eval_probe, gold_map, mine_bitext, mining_f1, read_gold, read_labels,
    retrieve_p1, train_probe, write_gold, EmbeddingMatrix, MarginKind, MiningConfig, MiningStrategy, ProbeConfig,
};
use ems_core::model::ModelConfig;
use ems_core::trainer::{resume_state, train, TrainConfig};
use ems_core::{checkpoint, EmsError, Result};
use serde_json::{Map, Value};

use crate::toy::{gen_toy, ToyConfig};

#[derive(Debug, Parser)]
#[command(name = "ems", version, about = "Train and evaluate multilingual sentence embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary from a parallel TSV corpus.
    BuildVocab(BuildVocabArgs),
    /// Train the encoder with the joint objective.
    Train(TrainArgs),
    /// Embed sentences with a trained checkpoint.
    Embed(EmbedArgs),
    /// P@1 retrieval between two embedding files.
    Retrieve(RetrieveArgs),
    /// Margin-based bitext mining between two embedding files.
    Mine(MineArgs),
    /// Train a classifier on one embedding file and test it on another.
    Probe(ProbeArgs),
    /// Write a synthetic parallel corpus with a known alignment.
    GenToy(GenToyArgs),
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    /// Parallel corpus, `src_lang<TAB>tgt_lang<TAB>src<TAB>tgt` per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Target vocabulary size including special and language tokens.
    #[arg(long, default_value_t = 8000)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Flat JSON file with training and model fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for `checkpoint.ckpt` and `loss.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Ablation switch; repeatable. One of no_lang_tok, no_cntrs, no_xtr,
    /// no_cntrs_mlp, share_Lemb.
    #[arg(long = "ablate", value_name = "NAME")]
    pub ablate: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print a progress line every this many steps (0 for none).
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    #[command(flatten)]
    pub metrics: MetricsArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Side {
    Src,
    Tgt,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Plain text, one sentence per line (requires --lang).
    #[arg(long, conflicts_with = "tsv", required_unless_present = "tsv")]
    pub input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    pub lang: Option<String>,
    /// Parallel TSV corpus; embeds the side chosen by --side.
    #[arg(long, requires = "side")]
    pub tsv: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub side: Option<Side>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub candidates: PathBuf,
    /// TSV of `query_index<TAB>candidate_index`.
    #[arg(long)]
    pub gold: PathBuf,
    /// Average the query→candidate and candidate→query directions.
    #[arg(long)]
    pub bidirectional: bool,
    #[command(flatten)]
    pub metrics: MetricsArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MarginArg {
    Ratio,
    Distance,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Forward,
    Backward,
    Intersect,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = MarginArg::Ratio)]
    pub margin: MarginArg,
    #[arg(long, value_enum, default_value_t = StrategyArg::Intersect)]
    pub strategy: StrategyArg,
    /// Keep pairs scoring at least this much.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    /// Mined pairs as `score<TAB>src_index<TAB>tgt_index`.
    #[arg(long)]
    pub out: PathBuf,
    /// Gold pairs for precision, recall and F1.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[command(flatten)]
    pub metrics: MetricsArgs,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub train_emb: PathBuf,
    /// One integer class per line, aligned with --train-emb.
    #[arg(long)]
    pub train_labels: PathBuf,
    #[arg(long)]
    pub test_emb: PathBuf,
    #[arg(long)]
    pub test_labels: PathBuf,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "128")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to one more than the largest label seen.
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[command(flatten)]
    pub metrics: MetricsArgs,
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long, default_value_t = 3)]
    pub langs: usize,
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 50)]
    pub vocab_per_lang: usize,
    #[arg(long, default_value_t = 200)]
    pub heldout: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory for train.tsv, heldout.tsv and heldout.gold.tsv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Write machine-readable metrics JSON here.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    /// Include elapsed wall-clock seconds in the metrics.
    #[arg(long)]
    pub wall_time: bool,
}

/// Flat metrics record; absent values are omitted.
#[derive(Debug, Default)]
struct Metrics {
    task: &'static str,
    p_at_1: Option<f64>,
    f1: Option<f64>,
    accuracy: Option<f64>,
    steps: Option<u64>,
}

impl Metrics {
    fn write(&self, args: &MetricsArgs, started: Instant) -> Result<()> {
        let Some(path) = &args.metrics_out else {
            return Ok(());
        };
        let mut m = Map::new();
        m.insert("task".into(), Value::from(self.task));
        let opt = [("p_at_1", self.p_at_1), ("f1", self.f1), ("accuracy", self.accuracy)];
        for (k, v) in opt {
            if let Some(v) = v {
                m.insert(k.into(), Value::from(v));
            }
        }
        if let Some(s) = self.steps {
            m.insert("steps".into(), Value::from(s));
        }
        if args.wall_time {
            m.insert("wall_seconds".into(), Value::from(started.elapsed().as_secs_f64()));
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(m)).expect("metrics serialize");
        text.push('\n');
        checkpoint::write_atomic(path, text.as_bytes())
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &EmsError) -> i32 {
    match err {
        EmsError::Config(_) => 1,
        EmsError::Numerical(_) => 3,
        _ => 2,
    }
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::Train(a) => cmd_train(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Mine(a) => cmd_mine(a),
        Command::Probe(a) => cmd_probe(a),
        Command::GenToy(a) => cmd_gen_toy(a),
    }
}

fn cmd_build_vocab(a: BuildVocabArgs) -> Result<()> {
    let corpus = load_parallel_tsv(&a.corpus)?;
    let vocab = build_vocab(&corpus, a.size)?;
    vocab.save(&a.out)?;
    println!(
        "vocabulary: {} entries ({} languages) from {} pairs -> {}",
        vocab.d_vcb(),
        vocab.lang_token_ids().len(),
        corpus.len(),
        a.out.display()
    );
    Ok(())
}

/// Overlays the keys of a flat JSON object onto the model and training
/// defaults. Unknown keys are configuration errors.
pub fn read_config(path: Option<&Path>, vocab: &Vocabulary) -> Result<(ModelConfig, TrainConfig)> {
    let model = ModelConfig::for_vocab(vocab);
    let train = TrainConfig::default();
    let Some(path) = path else {
        return Ok((model, train));
    };
    let text = fs::read_to_string(path).map_err(|e| EmsError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let bad = |m: String| EmsError::Config(format!("{}: {m}", path.display()));
    let file: Map<String, Value> = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let Value::Object(mut mv) = serde_json::to_value(&model).expect("serializes") else {
        unreachable!()
    };
    let Value::Object(mut tv) = serde_json::to_value(&train).expect("serializes") else {
        unreachable!()
    };
    for (k, v) in file {
        if mv.contains_key(&k) {
            mv.insert(k, v);
        } else if tv.contains_key(&k) {
            tv.insert(k, v);
        } else {
            return Err(bad(format!("unknown configuration key {k:?}")));
        }
    }
    let model: ModelConfig = serde_json::from_value(Value::Object(mv)).map_err(|e| bad(e.to_string()))?;
    let train: TrainConfig = serde_json::from_value(Value::Object(tv)).map_err(|e| bad(e.to_string()))?;
    Ok((model, train))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let corpus = load_parallel_tsv(&a.corpus)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let (model_cfg, mut cfg) = read_config(a.config.as_deref(), &vocab)?;
    for name in &a.ablate {
        cfg.ablation_flags.set(name)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(m) = a.max_steps {
        cfg.max_steps = Some(m);
    }
    if let Some(w) = a.warmup_steps {
        cfg.warmup_steps = w;
    }
    if let Some(c) = a.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    let resume = match &a.resume {
        Some(p) => Some(resume_state(p)?.0),
        None => None,
    };
    let active = cfg.ablation_flags.active();
    println!(
        "training on {} pairs, vocabulary {}, ablations [{}]",
        corpus.len(),
        vocab.d_vcb(),
        active.join(", ")
    );
    let log_every = a.log_every;
    let out = train(&corpus, &vocab, &model_cfg, &cfg, &a.out_dir, resume, |row| {
        if log_every > 0 && row.step % log_every == 0 {
            println!(
                "step {:>6}  lr {:.2e}  xtr {:.4}  cntrs {:.4}  joint {:.4}",
                row.step, row.lr, row.loss.xtr, row.loss.cntrs, row.loss.joint
            );
        }
    })?;
    if let Some(last) = out.curve.last() {
        println!(
            "finished at step {}: joint loss {:.4} (xtr {:.4}, cntrs {:.4})",
            out.state.step, last.loss.joint, last.loss.xtr, last.loss.cntrs
        );
    }
    println!("checkpoint: {}", out.checkpoint.display());
    println!("loss curve: {}", out.loss_curve.display());
    Metrics {
        task: "train",
        steps: Some(out.state.step),
        ..Metrics::default()
    }
    .write(&a.metrics, started)
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?.model;
    let vocab = Vocabulary::load(&a.vocab)?;
    if model.cfg.d_vcb != vocab.d_vcb() {
        return Err(EmsError::InvalidInput(format!(
            "checkpoint expects {} vocabulary entries, {} has {}",
            model.cfg.d_vcb,
            a.vocab.display(),
            vocab.d_vcb()
        )));
    }
    let (sentences, lang) = match (&a.input, &a.tsv) {
        (Some(input), _) => {
            let text = fs::read_to_string(input).map_err(|e| EmsError::Io {
                path: input.clone(),
                source: e,
            })?;
            let lang = a
                .lang
                .clone()
                .ok_or_else(|| EmsError::Config("--input needs --lang".into()))?;
            (text.lines().map(str::to_string).collect::<Vec<_>>(), lang)
        }
        (None, Some(tsv)) => {
            let corpus = load_parallel_tsv(tsv)?;
            let side = a.side.unwrap_or(Side::Src);
            let (texts, langs): (Vec<String>, Vec<&str>) = corpus
                .pairs()
                .iter()
                .map(|p| match side {
                    Side::Src => (p.src_text.clone(), p.src_lang.as_str()),
                    Side::Tgt => (p.tgt_text.clone(), p.tgt_lang.as_str()),
                })
                .unzip();
            let first = langs[0];
            let lang = if langs.iter().all(|&l| l == first) { first } else { "mixed" };
            (texts, lang.to_string())
        }
        (None, None) => return Err(EmsError::Config("give --input or --tsv".into())),
    };
    let embedded = embed_corpus(&model, &vocab, &sentences, &lang, a.batch_size)?;
    embedded.matrix.save(&a.out)?;
    println!(
        "embedded {} sentences ({} dims, lang {}) -> {}",
        embedded.matrix.len(),
        embedded.matrix.dim(),
        lang,
        a.out.display()
    );
    if !embedded.skipped.is_empty() {
        println!(
            "skipped {} empty sentence(s) at input index {:?}",
            embedded.skipped.len(),
            embedded.skipped
        );
    }
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    let started = Instant::now();
    let q = EmbeddingMatrix::load(&a.queries)?;
    let c = EmbeddingMatrix::load(&a.candidates)?;
    let gold = read_gold(&a.gold)?;
    let p1 = if a.bidirectional {
        bidirectional_p1(&q, &c, &gold)?
    } else {
        retrieve_p1(&q, &c, &gold_map(&gold, q.len())?)?
    };
    let label = if a.bidirectional { "bidirectional P@1" } else { "P@1" };
    println!("{label}: {p1:.4} over {} queries", q.len());
    Metrics {
        task: "retrieve",
        p_at_1: Some(p1),
        ..Metrics::default()
    }
    .write(&a.metrics, started)
}

fn cmd_mine(a: MineArgs) -> Result<()> {
    let started = Instant::now();
    let src = EmbeddingMatrix::load(&a.src)?;
    let tgt = EmbeddingMatrix::load(&a.tgt)?;
    let cfg = MiningConfig {
        k: a.k,
        margin: match a.margin {
            MarginArg::Ratio => MarginKind::Ratio,
            MarginArg::Distance => MarginKind::Distance,
            MarginArg::Absolute => MarginKind::Absolute,
        },
        strategy: match a.strategy {
            StrategyArg::Forward => MiningStrategy::Forward,
            StrategyArg::Backward => MiningStrategy::Backward,
            StrategyArg::Intersect => MiningStrategy::Intersect,
        },
        threshold: a.threshold.unwrap_or(f64::NEG_INFINITY),
    };
    let result = mine_bitext(&src, &tgt, &cfg)?;
    checkpoint::write_atomic(&a.out, result.to_tsv().as_bytes())?;
    println!("mined {} pairs -> {}", result.pairs.len(), a.out.display());
    let mut metrics = Metrics {
        task: "mine",
        ..Metrics::default()
    };
    if let Some(g) = &a.gold {
        let prf = mining_f1(&result, &read_gold(g)?)?;
        println!(
            "precision {:.4}  recall {:.4}  F1 {:.4}",
            prf.precision, prf.recall, prf.f1
        );
        metrics.f1 = Some(prf.f1);
    }
    metrics.write(&a.metrics, started)
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let started = Instant::now();
    let train_emb = EmbeddingMatrix::load(&a.train_emb)?;
    let test_emb = EmbeddingMatrix::load(&a.test_emb)?;
    let train_y = read_labels(&a.train_labels)?;
    let test_y = read_labels(&a.test_labels)?;
    let n_classes = a
        .n_classes
        .unwrap_or_else(|| train_y.iter().chain(&test_y).max().map_or(0, |m| m + 1));
    let cfg = ProbeConfig {
        hidden: a.hidden.clone(),
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        n_classes,
    };
    let probe = train_probe(&train_emb, &train_y, &cfg)?;
    let train_acc = eval_probe(&probe, &train_emb, &train_y)?;
    let acc = eval_probe(&probe, &test_emb, &test_y)?;
    println!(
        "probe trained on {} ({} rows), accuracy {:.4}; tested on {} ({} rows), accuracy {:.4}",
        train_emb.lang,
        train_emb.len(),
        train_acc,
        test_emb.lang,
        test_emb.len(),
        acc
    );
    Metrics {
        task: "probe",
        accuracy: Some(acc),
        ..Metrics::default()
    }
    .write(&a.metrics, started)
}

fn cmd_gen_toy(a: GenToyArgs) -> Result<()> {
    let data = gen_toy(&ToyConfig {
        langs: a.langs,
        pairs: a.pairs,
        vocab_per_lang: a.vocab_per_lang,
        heldout: a.heldout,
        seed: a.seed,
    })?;
    fs::create_dir_all(&a.out).map_err(|e| EmsError::Io {
        path: a.out.clone(),
        source: e,
    })?;
    data.train.write_tsv(a.out.join("train.tsv"))?;
    data.heldout.write_tsv(a.out.join("heldout.tsv"))?;
    let gold: Vec<(usize, usize)> = (0..data.heldout.len()).map(|i| (i, i)).collect();
    write_gold(a.out.join("heldout.gold.tsv"), &gold)?;
    println!(
        "wrote {} training and {} held-out pairs over {} languages to {}",
        data.train.len(),
        data.heldout.len(),
        a.langs,
        a.out.display()
    );
    Ok(())
}
