//! Shared transformer encoder and masked mean pooling.
//!
//! Sentences are packed: only real tokens are materialised, each sentence
//! occupying a contiguous run of rows. Attention runs per sentence, so pad
//! positions never enter any computation. Layer norm is applied before each
//! sub-block, positions are learned, and the feed-forward activation is ReLU.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::MAX_TOKENS;
use crate::error::{EmsError, Result};
use crate::tensor::{affine, softmax_rows, Grads, Init, ParamId, ParamStore, Real};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d: usize,
    pub d_ff: usize,
    pub dropout_hidden: f64,
    pub dropout_attn: f64,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 2,
            n_heads: 4,
            d: 64,
            d_ff: 256,
            dropout_hidden: 0.1,
            dropout_attn: 0.1,
            max_positions: 128,
        }
    }
}

impl EncoderConfig {
    /// 6 layers, 16 heads, hidden 1024, feed-forward 4096.
    pub fn full_scale() -> Self {
        EncoderConfig {
            n_layers: 6,
            n_heads: 16,
            d: 1024,
            d_ff: 4096,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(EmsError::Config(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.d == 0 || self.d_ff == 0 {
            return fail("encoder dimensions must be positive".into());
        }
        if self.d % self.n_heads != 0 {
            return fail(format!(
                "hidden size {} is not divisible by {} heads",
                self.d, self.n_heads
            ));
        }
        for (name, p) in [("dropout_hidden", self.dropout_hidden), ("dropout_attn", self.dropout_attn)] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} = {p} is outside [0, 1)"));
            }
        }
        if self.max_positions < MAX_TOKENS {
            return fail(format!(
                "max_positions {} is below the {MAX_TOKENS}-token truncation length",
                self.max_positions
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}

/// Affine layer `y = x·wᵀ + b` with `w` stored out×in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        out_dim: usize,
        in_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), &[out_dim, in_dim], Init::Normal(std), rng);
        let b = bias.then(|| store.add(&format!("{name}.b"), &[out_dim], Init::Zeros, rng));
        Linear { w, b }
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &ArrayView2<'_, F>) -> Array2<F> {
        affine(x, &store.mat(self.w), self.b.map(|b| store.vec(b)))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        x: &ArrayView2<'_, F>,
        dy: &ArrayView2<'_, F>,
    ) -> Array2<F> {
        self.accumulate(grads, x, dy);
        dy.dot(&store.mat(self.w))
    }

    pub fn accumulate<F: Real>(&self, grads: &mut Grads<F>, x: &ArrayView2<'_, F>, dy: &ArrayView2<'_, F>) {
        grads.mat_mut(self.w).scaled_add(F::one(), &dy.t().dot(x));
        if let Some(b) = self.b {
            grads.vec_mut(b).scaled_add(F::one(), &dy.sum_axis(Axis(0)));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub(crate) struct LnCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        LayerNorm {
            gain: store.add(&format!("{name}.g"), &[d], Init::Ones, rng),
            bias: store.add(&format!("{name}.b"), &[d], Init::Zeros, rng),
        }
    }

    pub(crate) fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Array2<F>) -> (Array2<F>, LnCache<F>) {
        let n = F::from_usize(x.ncols()).unwrap();
        let eps = F::of(LN_EPS);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / n;
            *inv = F::one() / (var + eps).sqrt();
            let k = *inv;
            row.mapv_inplace(|v| v * k);
        }
        let y = &xhat * &store.vec(self.gain) + &store.vec(self.bias);
        (y, LnCache { xhat, inv_std })
    }

    pub(crate) fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &LnCache<F>,
        dy: &Array2<F>,
    ) -> Array2<F> {
        grads
            .vec_mut(self.gain)
            .scaled_add(F::one(), &(dy * &cache.xhat).sum_axis(Axis(0)));
        grads.vec_mut(self.bias).scaled_add(F::one(), &dy.sum_axis(Axis(0)));
        let dxhat = dy * &store.vec(self.gain);
        let n = F::from_usize(dy.ncols()).unwrap();
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let sum_g = g.sum();
            let sum_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>();
            Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                *o = inv / n * (n * gi - sum_g - xi * sum_gx);
            });
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// Parameter handles of the encoder; the tensors live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub d_vcb: usize,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub ln_final: LayerNorm,
}

/// Contiguous row range of one sentence in the packed layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

pub fn segments_from_mask(mask: &ArrayView2<'_, u8>) -> Result<Vec<Segment>> {
    let mut start = 0;
    let mut segs = Vec::with_capacity(mask.nrows());
    for (b, row) in mask.rows().into_iter().enumerate() {
        let len = row.iter().take_while(|&&m| m == 1).count();
        if row.iter().skip(len).any(|&m| m != 0) {
            return Err(EmsError::InvalidInput(format!(
                "mask row {b} is not left-aligned 0/1"
            )));
        }
        if len == 0 {
            return Err(EmsError::InvalidInput(format!("row {b} has no real tokens")));
        }
        segs.push(Segment { start, len });
        start += len;
    }
    Ok(segs)
}

/// Mean of the rows of `hidden`.
///
/// Each column is summed in sorted order, so the result does not depend on
/// the order of the rows down to the last bit.
pub fn mean_pool<F: Real>(hidden: &ArrayView2<'_, F>) -> Array1<F> {
    let n = F::from_usize(hidden.nrows()).unwrap();
    let mut column = Vec::with_capacity(hidden.nrows());
    hidden
        .columns()
        .into_iter()
        .map(|c| {
            column.clear();
            column.extend(c.iter().copied());
            column.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            column.iter().fold(F::zero(), |acc, &x| acc + x) / n
        })
        .collect()
}

fn dropout_mask<F: Real>(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64, active: bool) -> Option<Array2<F>> {
    if !active || p == 0.0 {
        return None;
    }
    let keep = F::of(1.0 / (1.0 - p));
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.gen::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    }))
}

fn apply_mask<F: Real>(x: &mut Array2<F>, mask: &Option<Array2<F>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

struct LayerCache<F> {
    ln_attn: LnCache<F>,
    a: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    prob_drop: Vec<Option<Array2<F>>>,
    ctx: Array2<F>,
    attn_drop: Option<Array2<F>>,
    ln_ff: LnCache<F>,
    c: Array2<F>,
    ff_pre: Array2<F>,
    ff_act: Array2<F>,
    ff_drop: Option<Array2<F>>,
}

/// Everything the backward pass needs from one forward call.
pub struct EncoderCache<F> {
    ids: Vec<u32>,
    positions: Vec<usize>,
    emb_drop: Option<Array2<F>>,
    layers: Vec<LayerCache<F>>,
    ln_final: LnCache<F>,
}

pub struct EncoderOutput<F> {
    /// Final-layer states of real tokens, packed sentence after sentence.
    pub packed: Array2<F>,
    pub pooled: Array2<F>,
    pub segments: Vec<Segment>,
    pub cache: Option<EncoderCache<F>>,
}

impl<F: Real> EncoderOutput<F> {
    /// Hidden states as B×L×d with zeros at pad positions.
    pub fn padded_hidden(&self, width: usize) -> Array3<F> {
        let d = self.packed.ncols();
        let mut out = Array3::zeros((self.segments.len(), width, d));
        for (b, seg) in self.segments.iter().enumerate() {
            out.slice_mut(s![b, ..seg.len, ..])
                .assign(&self.packed.slice(s![seg.start..seg.start + seg.len, ..]));
        }
        out
    }
}

impl Encoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        cfg: &EncoderConfig,
        d_vcb: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.d;
        let token_embedding = store.add("enc.tok_emb", &[d_vcb, d], Init::Normal(std), rng);
        let position_embedding = store.add("enc.pos_emb", &[cfg.max_positions, d], Init::Normal(std), rng);
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("enc.layer{i}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d, rng),
                    wq: Linear::new(store, &format!("{p}.attn.q"), d, d, true, std, rng),
                    wk: Linear::new(store, &format!("{p}.attn.k"), d, d, true, std, rng),
                    wv: Linear::new(store, &format!("{p}.attn.v"), d, d, true, std, rng),
                    wo: Linear::new(store, &format!("{p}.attn.o"), d, d, true, std, rng),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d, rng),
                    ff_in: Linear::new(store, &format!("{p}.ff.in"), cfg.d_ff, d, true, std, rng),
                    ff_out: Linear::new(store, &format!("{p}.ff.out"), d, cfg.d_ff, true, std, rng),
                }
            })
            .collect();
        let ln_final = LayerNorm::new(store, "enc.ln_final", d, rng);
        Encoder {
            cfg: cfg.clone(),
            d_vcb,
            token_embedding,
            position_embedding,
            layers,
            ln_final,
        }
    }

    /// Runs the encoder on a padded id matrix.
    ///
    /// `record` keeps the activations needed by [`Encoder::backward`].
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        ids: &ArrayView2<'_, u32>,
        mask: &ArrayView2<'_, u8>,
        train_mode: bool,
        seed: u64,
        record: bool,
    ) -> Result<EncoderOutput<F>> {
        if ids.dim() != mask.dim() {
            return Err(EmsError::InvalidInput(format!(
                "id matrix {:?} and mask {:?} differ in shape",
                ids.dim(),
                mask.dim()
            )));
        }
        let segments = segments_from_mask(mask)?;
        let total: usize = segments.iter().map(|s| s.len).sum();
        let d = self.cfg.d;
        let mut tok_ids = Vec::with_capacity(total);
        let mut positions = Vec::with_capacity(total);
        for (b, seg) in segments.iter().enumerate() {
            if seg.len > self.cfg.max_positions {
                return Err(EmsError::InvalidInput(format!(
                    "row {b} has {} tokens, more than {} positions",
                    seg.len, self.cfg.max_positions
                )));
            }
            for i in 0..seg.len {
                let id = ids[[b, i]];
                if id as usize >= self.d_vcb {
                    return Err(EmsError::InvalidInput(format!(
                        "token id {id} outside vocabulary of {}",
                        self.d_vcb
                    )));
                }
                tok_ids.push(id);
                positions.push(i);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tok = store.mat(self.token_embedding);
        let pos = store.mat(self.position_embedding);
        let mut x = Array2::zeros((total, d));
        for (r, (&id, &p)) in tok_ids.iter().zip(&positions).enumerate() {
            let mut row = x.row_mut(r);
            row.assign(&tok.row(id as usize));
            row += &pos.row(p);
        }
        let emb_drop = dropout_mask(&mut rng, (total, d), self.cfg.dropout_hidden, train_mode);
        apply_mask(&mut x, &emb_drop);

        let mut layer_caches = Vec::new();
        for layer in &self.layers {
            let (next, cache) = self.layer_forward(store, layer, x, &segments, train_mode, &mut rng);
            x = next;
            if record {
                layer_caches.push(cache);
            }
        }
        let (packed, ln_final) = self.ln_final.forward(store, &x);
        let mut pooled = Array2::zeros((segments.len(), d));
        for (b, seg) in segments.iter().enumerate() {
            pooled
                .row_mut(b)
                .assign(&mean_pool(&packed.slice(s![seg.start..seg.start + seg.len, ..])));
        }
        let cache = record.then(|| EncoderCache {
            ids: tok_ids,
            positions,
            emb_drop,
            layers: layer_caches,
            ln_final,
        });
        Ok(EncoderOutput {
            packed,
            pooled,
            segments,
            cache,
        })
    }

    fn layer_forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        layer: &EncoderLayer,
        x: Array2<F>,
        segments: &[Segment],
        train_mode: bool,
        rng: &mut ChaCha8Rng,
    ) -> (Array2<F>, LayerCache<F>) {
        let cfg = &self.cfg;
        let dh = cfg.head_dim();
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();

        let (a, ln_attn) = layer.ln_attn.forward(store, &x);
        let q = layer.wq.forward(store, &a.view());
        let k = layer.wk.forward(store, &a.view());
        let v = layer.wv.forward(store, &a.view());
        let mut ctx = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(segments.len() * cfg.n_heads);
        let mut prob_drop = Vec::with_capacity(segments.len() * cfg.n_heads);
        for seg in segments {
            let rows = seg.start..seg.start + seg.len;
            for h in 0..cfg.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = q.slice(s![rows.clone(), cols.clone()]);
                let ks = k.slice(s![rows.clone(), cols.clone()]);
                let vs = v.slice(s![rows.clone(), cols.clone()]);
                let p = softmax_rows(&(qs.dot(&ks.t()) * scale));
                let m = dropout_mask(rng, p.dim(), cfg.dropout_attn, train_mode);
                let out = match &m {
                    Some(m) => (&p * m).dot(&vs),
                    None => p.dot(&vs),
                };
                ctx.slice_mut(s![rows.clone(), cols]).assign(&out);
                probs.push(p);
                prob_drop.push(m);
            }
        }
        let mut o = layer.wo.forward(store, &ctx.view());
        let attn_drop = dropout_mask(rng, o.dim(), cfg.dropout_hidden, train_mode);
        apply_mask(&mut o, &attn_drop);
        let x1 = &x + &o;

        let (c, ln_ff) = layer.ln_ff.forward(store, &x1);
        let ff_pre = layer.ff_in.forward(store, &c.view());
        let ff_act = ff_pre.mapv(|z| z.max(F::zero()));
        let mut f = layer.ff_out.forward(store, &ff_act.view());
        let ff_drop = dropout_mask(rng, f.dim(), cfg.dropout_hidden, train_mode);
        apply_mask(&mut f, &ff_drop);
        let x2 = &x1 + &f;

        let cache = LayerCache {
            ln_attn,
            a,
            q,
            k,
            v,
            probs,
            prob_drop,
            ctx,
            attn_drop,
            ln_ff,
            c,
            ff_pre,
            ff_act,
            ff_drop,
        };
        (x2, cache)
    }

    /// Backpropagates a gradient on the pooled vectors into `grads`.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        out: &EncoderOutput<F>,
        d_pooled: &ArrayView2<'_, F>,
    ) {
        let cache = out
            .cache
            .as_ref()
            .expect("encoder forward was run without recording");
        let d = self.cfg.d;
        let mut dh = Array2::zeros((out.packed.nrows(), d));
        for (b, seg) in out.segments.iter().enumerate() {
            let share = d_pooled.row(b).mapv(|g| g / F::from_usize(seg.len).unwrap());
            for r in seg.start..seg.start + seg.len {
                dh.row_mut(r).assign(&share);
            }
        }
        let mut dx = self.ln_final.backward(store, grads, &cache.ln_final, &dh);
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(store, grads, layer, lc, &out.segments, dx);
        }
        apply_mask(&mut dx, &cache.emb_drop);
        let mut dtok = grads.mat_mut(self.token_embedding);
        for (r, &id) in cache.ids.iter().enumerate() {
            let mut row = dtok.row_mut(id as usize);
            row += &dx.row(r);
        }
        let mut dpos = grads.mat_mut(self.position_embedding);
        for (r, &p) in cache.positions.iter().enumerate() {
            let mut row = dpos.row_mut(p);
            row += &dx.row(r);
        }
    }

    fn layer_backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        layer: &EncoderLayer,
        lc: &LayerCache<F>,
        segments: &[Segment],
        dx2: Array2<F>,
    ) -> Array2<F> {
        let cfg = &self.cfg;
        let dh = cfg.head_dim();
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();

        // feed-forward block
        let mut df = dx2.clone();
        apply_mask(&mut df, &lc.ff_drop);
        let mut dact = layer.ff_out.backward(store, grads, &lc.ff_act.view(), &df.view());
        Zip::from(&mut dact)
            .and(&lc.ff_pre)
            .for_each(|g, &z| {
                if z <= F::zero() {
                    *g = F::zero();
                }
            });
        let dc = layer.ff_in.backward(store, grads, &lc.c.view(), &dact.view());
        let dx1 = dx2 + layer.ln_ff.backward(store, grads, &lc.ln_ff, &dc);

        // attention block
        let mut d_o = dx1.clone();
        apply_mask(&mut d_o, &lc.attn_drop);
        let dctx = layer.wo.backward(store, grads, &lc.ctx.view(), &d_o.view());
        let mut dq = Array2::zeros(lc.q.raw_dim());
        let mut dk = Array2::zeros(lc.k.raw_dim());
        let mut dv = Array2::zeros(lc.v.raw_dim());
        let mut idx = 0;
        for seg in segments {
            let rows = seg.start..seg.start + seg.len;
            for h in 0..cfg.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &lc.probs[idx];
                let m = &lc.prob_drop[idx];
                idx += 1;
                let qs = lc.q.slice(s![rows.clone(), cols.clone()]);
                let ks = lc.k.slice(s![rows.clone(), cols.clone()]);
                let vs = lc.v.slice(s![rows.clone(), cols.clone()]);
                let g = dctx.slice(s![rows.clone(), cols.clone()]);
                let (pd, mut dp) = match m {
                    Some(m) => (p * m, g.dot(&vs.t()) * m),
                    None => (p.clone(), g.dot(&vs.t())),
                };
                dv.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&pd.t().dot(&g));
                for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                    let inner = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    Zip::from(&mut drow).and(&prow).for_each(|x, &pi| *x = pi * (*x - inner));
                }
                let ds = dp * scale;
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qs));
            }
        }
        let a = lc.a.view();
        let mut da = layer.wq.backward(store, grads, &a, &dq.view());
        da += &layer.wk.backward(store, grads, &a, &dk.view());
        da += &layer.wv.backward(store, grads, &a, &dv.view());
        dx1 + layer.ln_attn.backward(store, grads, &lc.ln_attn, &da)
    }
}

/// Derives an independent stream seed, e.g. one per tower or per step.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
