//! Joint training loop.
//!
//! Batch order and dropout masks are pure functions of `(seed, step)`, so a
//! run resumed from a checkpoint replays the uninterrupted trajectory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, write_atomic};
use crate::corpus::{Batch, EncodedCorpus, ParallelCorpus, Vocabulary, MAX_TOKENS};
use crate::encoder::derive_seed;
use crate::error::{EmsError, Result};
use crate::model::{LossReport, Model, ModelConfig};
use crate::objectives::Ablations;
use crate::optim::{warmup_lr, Adam, AdamConfig};
use crate::tensor::{Grads, Real};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_CURVE_FILE: &str = "loss.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation_flags: Ablations,
    /// 0 writes a checkpoint only at the end.
    pub checkpoint_every: u64,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            warmup_steps: 200,
            weight_decay: 1e-5,
            epochs: 3,
            max_steps: None,
            batch_size: 32,
            seed: 0,
            ablation_flags: Ablations::default(),
            checkpoint_every: 0,
            grad_clip: None,
            max_len: MAX_TOKENS,
        }
    }
}

impl TrainConfig {
    /// Batch 152, warmup 10,000, 3 epochs.
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 152,
            warmup_steps: 10_000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EmsError::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail(format!("learning rate {} must be finite and positive", self.lr));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!(
                "batch size {} leaves no in-batch negatives; need at least 2",
                self.batch_size
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip {c} must be positive"));
            }
        }
        self.ablation_flags.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Learning rate for 1-based `step`.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    warmup_lr(cfg.lr, cfg.warmup_steps, step)
}

/// Parameters, optimizer moments and the step counter.
///
/// The random state is `(cfg.seed, step)`: every stream is derived from it.
#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub model: Model<F>,
    pub adam: Adam<F>,
    pub step: u64,
    grads: Grads<F>,
}

impl<F: Real> TrainState<F> {
    pub fn new(model: Model<F>, cfg: &TrainConfig) -> Self {
        let adam = Adam::new(&model.store, cfg.adam());
        let grads = model.store.zeros_like();
        TrainState {
            model,
            adam,
            step: 0,
            grads,
        }
    }

    pub fn from_parts(model: Model<F>, adam: Adam<F>, step: u64) -> Self {
        let grads = model.store.zeros_like();
        TrainState {
            model,
            adam,
            step,
            grads,
        }
    }

    /// Gradients accumulated by the most recent step.
    pub fn last_grads(&self) -> &Grads<F> {
        &self.grads
    }
}

/// One forward/backward pass and one optimizer update.
pub fn train_step<F: Real>(state: &mut TrainState<F>, batch: &Batch, cfg: &TrainConfig) -> Result<LossReport> {
    let step = state.step + 1;
    state.grads.zero();
    let report = state
        .model
        .forward_backward(batch, true, derive_seed(cfg.seed, step), Some(&mut state.grads))
        .map_err(|e| match e {
            EmsError::Numerical(msg) => EmsError::Numerical(format!("step {step}: {msg}")),
            other => other,
        })?;
    if let Some(clip) = cfg.grad_clip {
        let norm = state.grads.global_norm().as_f64();
        if norm > clip {
            state.grads.scale(F::of(clip / norm));
        }
    }
    state.adam.step(&mut state.model.store, &state.grads, lr_at(cfg, step));
    state.step = step;
    if !state.model.store.all_finite() {
        return Err(EmsError::Numerical(format!(
            "step {step}: parameters became non-finite"
        )));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub lr: f64,
    pub loss: LossReport,
}

impl CurveRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.lr, self.loss.xtr, self.loss.cntrs, self.loss.joint
        )
    }
}

pub const CURVE_HEADER: &str = "step,lr,xtr,cntrs,joint";

pub fn parse_curve(text: &str) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || EmsError::InvalidInput(format!("bad loss-curve line {}: {line:?}", i + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        rows.push(CurveRow {
            step: f[0].parse().map_err(|_| bad())?,
            lr: num(f[1])?,
            loss: LossReport {
                xtr: num(f[2])?,
                cntrs: num(f[3])?,
                joint: num(f[4])?,
            },
        });
    }
    Ok(rows)
}

pub struct TrainOutcome {
    pub state: TrainState<f32>,
    pub curve: Vec<CurveRow>,
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
}

/// Total number of optimizer steps the configuration asks for.
pub fn planned_steps(cfg: &TrainConfig, n_pairs: usize) -> u64 {
    let per_epoch = n_pairs.div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    cfg.max_steps.map_or(total, |m| m.min(total))
}

/// Trains from scratch, or continues `resume` up to the configured step count.
///
/// Writes `checkpoint.ckpt` (atomically, every `checkpoint_every` steps and
/// at the end) and `loss.csv` into `out_dir`.
pub fn train(
    corpus: &ParallelCorpus,
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<TrainState<f32>>,
    mut on_step: impl FnMut(&CurveRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model_cfg = model_cfg.clone();
    model_cfg.d_vcb = vocab.d_vcb();
    model_cfg.lang_ids = vocab.lang_token_ids().values().copied().collect();
    fs::create_dir_all(out_dir).map_err(|e| EmsError::io(out_dir, e))?;
    let encoded = EncodedCorpus::new(corpus, vocab, cfg.max_len)?;
    let per_epoch = encoded.num_batches(cfg.batch_size) as u64;
    let total = planned_steps(cfg, encoded.len());

    let mut state = match resume {
        Some(state) => {
            if state.model.cfg != model_cfg || state.model.ablation != cfg.ablation_flags {
                return Err(EmsError::Config(
                    "resumed model does not match the requested configuration".into(),
                ));
            }
            state
        }
        None => {
            let model = Model::new(model_cfg, cfg.ablation_flags, derive_seed(cfg.seed, 0xE115))?;
            TrainState::new(model, cfg)
        }
    };

    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let curve_path = out_dir.join(LOSS_CURVE_FILE);
    let mut curve: Vec<CurveRow> = match fs::read_to_string(&curve_path) {
        Ok(text) if state.step > 0 => parse_curve(&text)?
            .into_iter()
            .filter(|r| r.step <= state.step)
            .collect(),
        _ => Vec::new(),
    };

    let write_curve = |curve: &[CurveRow]| -> Result<()> {
        let mut text = String::from(CURVE_HEADER);
        text.push('\n');
        for row in curve {
            let _ = writeln!(text, "{}", row.csv());
        }
        write_atomic(&curve_path, text.as_bytes())
    };

    let mut epoch_batches: Option<(u64, Vec<Batch>)> = None;
    while state.step < total {
        let next = state.step + 1;
        let epoch = (next - 1) / per_epoch;
        let index = ((next - 1) % per_epoch) as usize;
        if epoch_batches.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let batches = encoded.batches(cfg.batch_size, derive_seed(cfg.seed, 1_000 + epoch))?;
            epoch_batches = Some((epoch, batches));
        }
        let batch = &epoch_batches.as_ref().unwrap().1[index];
        if batch.size() < 2 {
            // a trailing single-pair batch has no negatives; skip its update
            state.step = next;
            state.adam.t = next;
            continue;
        }
        let loss = train_step(&mut state, batch, cfg)?;
        let row = CurveRow {
            step: state.step,
            lr: lr_at(cfg, state.step),
            loss,
        };
        on_step(&row);
        curve.push(row);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < total {
            checkpoint::save(&ckpt_path, &state.model, state.step, Some(cfg), Some(&state.adam))?;
            write_curve(&curve)?;
        }
    }
    checkpoint::save(&ckpt_path, &state.model, state.step, Some(cfg), Some(&state.adam))?;
    write_curve(&curve)?;
    Ok(TrainOutcome {
        state,
        curve,
        checkpoint: ckpt_path,
        loss_curve: curve_path,
    })
}

/// Restores a training state from a checkpoint written by [`train`].
pub fn resume_state(path: impl AsRef<Path>) -> Result<(TrainState<f32>, Option<TrainConfig>)> {
    let ck = checkpoint::load(path.as_ref())?;
    let adam = ck.adam.ok_or_else(|| {
        EmsError::InvalidInput(format!(
            "{} holds no optimizer state to resume from",
            path.as_ref().display()
        ))
    })?;
    Ok((TrainState::from_parts(ck.model, adam, ck.step), ck.train))
}
