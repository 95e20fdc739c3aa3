//! The full trainable model: shared encoder plus both objective heads.

use std::collections::BTreeSet;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{row_tokens, Batch, Vocabulary};
use crate::encoder::{derive_seed, Encoder, EncoderConfig, EncoderOutput};
use crate::error::{EmsError, Result};
use crate::objectives::{joint_loss, target_distribution, Ablations, ContrastiveHead, XtrHead};
use crate::tensor::{Grads, ParamStore, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub encoder: EncoderConfig,
    /// Filled in from the vocabulary when omitted.
    #[serde(default)]
    pub d_vcb: usize,
    pub d_la: usize,
    pub d_cntrs: usize,
    pub temperature: f64,
    /// Bias terms on the head layers; off gives the pure-matrix heads.
    pub head_bias: bool,
    pub init_std: f64,
    /// Vocabulary ids of the `<2xx>` tokens.
    #[serde(default)]
    pub lang_ids: Vec<u32>,
}

impl ModelConfig {
    /// Desk-scale defaults sized for `vocab`.
    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            d_vcb: vocab.d_vcb(),
            d_la: 128,
            d_cntrs: 32,
            temperature: 0.1,
            head_bias: true,
            init_std: 0.02,
            lang_ids: vocab.lang_token_ids().values().copied().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let fail = |m: String| Err(EmsError::Config(m));
        if self.d_la == 0 || self.d_cntrs == 0 {
            return fail("d_la and d_cntrs must be positive".into());
        }
        if self.d_cntrs >= self.encoder.d {
            return fail(format!(
                "d_cntrs {} must be smaller than the hidden size {}",
                self.d_cntrs, self.encoder.d
            ));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.init_std > 0.0) {
            return fail(format!("init_std {} must be positive", self.init_std));
        }
        if let Some(&bad) = self.lang_ids.iter().find(|&&l| l as usize >= self.d_vcb) {
            return fail(format!("language id {bad} outside vocabulary of {}", self.d_vcb));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub xtr: f64,
    pub cntrs: f64,
    pub joint: f64,
}

pub struct PairOutput<F> {
    pub src: EncoderOutput<F>,
    pub tgt: EncoderOutput<F>,
}

impl<F: Real> PairOutput<F> {
    pub fn u(&self) -> ArrayView2<'_, F> {
        self.src.pooled.view()
    }

    pub fn v(&self) -> ArrayView2<'_, F> {
        self.tgt.pooled.view()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub ablation: Ablations,
    pub store: ParamStore<F>,
    pub encoder: Encoder,
    pub xtr: XtrHead,
    pub cntrs: ContrastiveHead,
}

impl<F: Real> Model<F> {
    pub fn new(cfg: ModelConfig, ablation: Ablations, seed: u64) -> Result<Self> {
        cfg.validate()?;
        ablation.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let std = cfg.init_std;
        let d = cfg.encoder.d;
        let encoder = Encoder::new(&mut store, &cfg.encoder, cfg.d_vcb, std, &mut rng);
        let shared = ablation.share_lemb.then_some(encoder.token_embedding);
        let lang_ids: BTreeSet<u32> = cfg.lang_ids.iter().copied().collect();
        let xtr = XtrHead::new(
            &mut store,
            d,
            cfg.d_la,
            cfg.d_vcb,
            lang_ids,
            cfg.head_bias,
            shared,
            std,
            &mut rng,
        );
        let cntrs = ContrastiveHead::new(&mut store, d, cfg.d_cntrs, cfg.temperature, cfg.head_bias, std, &mut rng);
        Ok(Model {
            cfg,
            ablation,
            store,
            encoder,
            xtr,
            cntrs,
        })
    }

    /// Rebuilds the handles for `cfg` and installs `store` (e.g. from a checkpoint).
    pub fn with_store(cfg: ModelConfig, ablation: Ablations, store: ParamStore<F>) -> Result<Self> {
        let mut model = Model::new(cfg, ablation, 0)?;
        if model.store.len() != store.len() {
            return Err(EmsError::InvalidInput(format!(
                "expected {} parameter tensors, got {}",
                model.store.len(),
                store.len()
            )));
        }
        for id in model.store.ids() {
            let want = model.store.get(id);
            let name = model.store.name(id);
            let found = store
                .find(name)
                .ok_or_else(|| EmsError::InvalidInput(format!("missing parameter {name}")))?;
            if store.get(found).shape() != want.shape() {
                return Err(EmsError::InvalidInput(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    store.get(found).shape(),
                    want.shape()
                )));
            }
        }
        let ordered: Vec<_> = model
            .store
            .ids()
            .map(|id| store.get(store.find(model.store.name(id)).unwrap()).clone())
            .collect();
        let names = model.store.ids().map(|id| model.store.name(id).to_string()).collect();
        model.store = ParamStore::from_parts(names, ordered);
        Ok(model)
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            ablation: self.ablation,
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            xtr: self.xtr.clone(),
            cntrs: self.cntrs.clone(),
        }
    }

    pub fn d(&self) -> usize {
        self.cfg.encoder.d
    }

    pub fn encode(
        &self,
        ids: &ArrayView2<'_, u32>,
        mask: &ArrayView2<'_, u8>,
        train_mode: bool,
        seed: u64,
    ) -> Result<EncoderOutput<F>> {
        self.encoder.forward(&self.store, ids, mask, train_mode, seed, false)
    }

    /// Both sides through the one shared encoder.
    pub fn encode_pair(&self, batch: &Batch, train_mode: bool, seed: u64, record: bool) -> Result<PairOutput<F>> {
        let src = self.encoder.forward(
            &self.store,
            &batch.src_ids.view(),
            &batch.src_mask.view(),
            train_mode,
            derive_seed(seed, 1),
            record,
        )?;
        let tgt = self.encoder.forward(
            &self.store,
            &batch.tgt_ids.view(),
            &batch.tgt_mask.view(),
            train_mode,
            derive_seed(seed, 2),
            record,
        )?;
        Ok(PairOutput { src, tgt })
    }

    /// Reconstruction loss over both directions of every pair.
    pub fn xtr_loss(&self, u: &ArrayView2<'_, F>, v: &ArrayView2<'_, F>, batch: &Batch) -> Result<F> {
        Ok(self.xtr_terms(u, v, batch, F::one(), None)?.0)
    }

    pub fn contrastive_loss(&self, u: &ArrayView2<'_, F>, v: &ArrayView2<'_, F>) -> Result<F> {
        if u.nrows() < 2 || u.nrows() != v.nrows() {
            return Err(EmsError::InvalidInput(format!(
                "contrastive loss needs two aligned sets of at least 2 rows, got {} and {}",
                u.nrows(),
                v.nrows()
            )));
        }
        let (loss, _) = self
            .cntrs
            .loss(&self.store, u, v, !self.ablation.no_cntrs_mlp, F::one(), None)?;
        Ok(loss)
    }

    fn xtr_terms(
        &self,
        u: &ArrayView2<'_, F>,
        v: &ArrayView2<'_, F>,
        batch: &Batch,
        scale: F,
        grads: Option<&mut Grads<F>>,
    ) -> Result<(F, Option<Array2<F>>)> {
        let b = batch.size();
        let d_vcb = self.cfg.d_vcb;
        // direction 1: u conditioned on the target language predicts the
        // target tokens; direction 2 is the mirror image
        let mut targets = Vec::with_capacity(2 * b);
        for i in 0..b {
            targets.push(target_distribution(&row_tokens(&batch.tgt_ids, &batch.tgt_mask, i), d_vcb)?);
        }
        for i in 0..b {
            targets.push(target_distribution(&row_tokens(&batch.src_ids, &batch.src_mask, i), d_vcb)?);
        }
        let langs: Vec<u32> = batch.tgt_lang_ids.iter().chain(&batch.src_lang_ids).copied().collect();
        let inputs = concatenate(Axis(0), &[u.view(), v.view()]).map_err(|_| {
            EmsError::InvalidInput("pooled matrices differ in width".into())
        })?;
        self.xtr.loss(
            &self.store,
            &inputs.view(),
            &langs,
            &targets,
            self.ablation.no_lang_tok,
            scale,
            grads,
        )
    }

    /// Forward pass of the joint objective; with `grads`, also the backward
    /// pass, accumulating `∂joint/∂θ`.
    pub fn forward_backward(
        &self,
        batch: &Batch,
        train_mode: bool,
        seed: u64,
        mut grads: Option<&mut Grads<F>>,
    ) -> Result<LossReport> {
        let b = batch.size();
        if b < 2 {
            return Err(EmsError::InvalidInput(format!(
                "batch of {b} pair(s) has no in-batch negatives"
            )));
        }
        let record = grads.is_some();
        let out = self.encode_pair(batch, train_mode, seed, record)?;
        let scale = F::one() / F::from_usize(b).unwrap();
        let d = self.d();
        let mut du = Array2::zeros((b, d));
        let mut dv = Array2::zeros((b, d));

        let mut xtr = F::zero();
        if !self.ablation.no_xtr {
            let (loss, dx) = self.xtr_terms(&out.u(), &out.v(), batch, scale, grads.as_deref_mut())?;
            xtr = loss;
            if let Some(dx) = dx {
                du += &dx.slice(s![..b, ..]);
                dv += &dx.slice(s![b.., ..]);
            }
        }
        let mut cntrs = F::zero();
        if !self.ablation.no_cntrs {
            let (loss, g) = self.cntrs.loss(
                &self.store,
                &out.u(),
                &out.v(),
                !self.ablation.no_cntrs_mlp,
                scale,
                grads.as_deref_mut(),
            )?;
            cntrs = loss;
            if let Some((gu, gv)) = g {
                du += &gu;
                dv += &gv;
            }
        }
        let joint = joint_loss(xtr, cntrs, b, &self.ablation)?;
        if !joint.is_finite() {
            return Err(EmsError::Numerical(format!(
                "non-finite loss (xtr {xtr}, contrastive {cntrs})"
            )));
        }
        if let Some(grads) = grads {
            self.encoder.backward(&self.store, grads, &out.src, &du.view());
            self.encoder.backward(&self.store, grads, &out.tgt, &dv.view());
        }
        Ok(LossReport {
            xtr: xtr.as_f64(),
            cntrs: cntrs.as_f64(),
            joint: joint.as_f64(),
        })
    }
}
