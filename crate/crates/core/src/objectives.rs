//! Training objectives: cross-lingual token-level reconstruction (XTR), the
//! in-batch contrastive loss, and their joint combination.
//!
//! XTR predicts the bag-of-subwords distribution of a sentence's translation
//! from the pooled source vector concatenated (language part first) with an
//! embedding of the target-language token:
//!
//! ```text
//! q = softmax(W_emb · swish(W_fc · (W_la[:, <2l'>] ⊕ u)))
//! L_xtr = Σ_pairs KL(p_tgt ‖ q(u, l')) + KL(p_src ‖ q(v, l))
//! ```
//!
//! The contrastive loss scores cosines of projected vectors
//! `h(u) = W_1 · relu(W_2 · u)` at temperature `T`, with the other rows of
//! the batch as negatives in both directions.

use std::collections::BTreeSet;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Linear;
use crate::error::{EmsError, Result};
use crate::tensor::{log_softmax_rows, sigmoid, Grads, Init, ParamId, ParamStore, Real};

/// Ablation switches. All off is the full model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Feed a fixed zero vector instead of the target-language embedding.
    pub no_lang_tok: bool,
    /// Drop the contrastive term from the joint loss.
    pub no_cntrs: bool,
    /// Drop the reconstruction term from the joint loss.
    pub no_xtr: bool,
    /// Compute contrastive cosines on the pooled vectors directly.
    pub no_cntrs_mlp: bool,
    /// Tie the sentence block of `W_emb` to the encoder token embedding.
    #[serde(rename = "share_Lemb")]
    pub share_lemb: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 5] = ["no_lang_tok", "no_cntrs", "no_xtr", "no_cntrs_mlp", "share_Lemb"];

    pub fn set(&mut self, name: &str) -> Result<()> {
        let flag = match name {
            "no_lang_tok" => &mut self.no_lang_tok,
            "no_cntrs" => &mut self.no_cntrs,
            "no_xtr" => &mut self.no_xtr,
            "no_cntrs_mlp" => &mut self.no_cntrs_mlp,
            "share_Lemb" | "share_lemb" => &mut self.share_lemb,
            other => {
                return Err(EmsError::Config(format!(
                    "unknown ablation {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        *flag = true;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.no_cntrs && self.no_xtr {
            return Err(EmsError::Config(
                "no_cntrs and no_xtr together leave no training signal".into(),
            ));
        }
        Ok(())
    }

    pub fn active(&self) -> Vec<&'static str> {
        let flags = [
            self.no_lang_tok,
            self.no_cntrs,
            self.no_xtr,
            self.no_cntrs_mlp,
            self.share_lemb,
        ];
        Self::NAMES
            .iter()
            .zip(flags)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }
}

/// Empirical token distribution of one sentence: `p(w) = N_w / |S|`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    d_vcb: usize,
    /// Sorted by id, strictly positive probabilities.
    support: Vec<(u32, f64)>,
}

impl TargetDistribution {
    pub fn support(&self) -> &[(u32, f64)] {
        &self.support
    }

    pub fn prob(&self, id: u32) -> f64 {
        self.support
            .binary_search_by_key(&id, |&(w, _)| w)
            .map_or(0.0, |i| self.support[i].1)
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut probs = vec![0.0; self.d_vcb];
        for &(w, p) in &self.support {
            probs[w as usize] = p;
        }
        probs
    }

    /// `Σ_{p(w)>0} p(w) (ln p(w) − log_q[w])`.
    pub fn kl_from_log_q<F: Real>(&self, log_q: ArrayView1<'_, F>) -> F {
        self.support
            .iter()
            .map(|&(w, p)| F::of(p) * (F::of(p.ln()) - log_q[w as usize]))
            .sum()
    }
}

pub fn target_distribution(ids: &[u32], d_vcb: usize) -> Result<TargetDistribution> {
    if ids.is_empty() {
        return Err(EmsError::InvalidInput(
            "target distribution of an empty sentence".into(),
        ));
    }
    if let Some(&bad) = ids.iter().find(|&&w| w as usize >= d_vcb) {
        return Err(EmsError::InvalidInput(format!(
            "token id {bad} outside vocabulary of {d_vcb}"
        )));
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let n = ids.len() as f64;
    let mut support: Vec<(u32, f64)> = Vec::new();
    for w in sorted {
        match support.last_mut() {
            Some((last, count)) if *last == w => *count += 1.0,
            _ => support.push((w, 1.0)),
        }
    }
    for (_, count) in &mut support {
        *count /= n;
    }
    Ok(TargetDistribution { d_vcb, support })
}

/// Reconstruction head: language embedding `W_la`, fully connected `W_fc`
/// with swish, and the output layer `W_emb`.
///
/// `W_emb` (d_vcb × (d_la + d)) is held as two column blocks so that the
/// sentence block can alias the encoder token embedding under `share_Lemb`.
#[derive(Debug, Clone, PartialEq)]
pub struct XtrHead {
    pub d_la: usize,
    pub d: usize,
    pub d_vcb: usize,
    /// d_la × d_vcb
    pub w_la: ParamId,
    pub fc: Linear,
    /// d_vcb × d_la
    pub emb_lang: ParamId,
    /// d_vcb × d
    pub emb_sent: ParamId,
    pub emb_bias: Option<ParamId>,
    pub lang_ids: BTreeSet<u32>,
}

#[allow(clippy::too_many_arguments)]
impl XtrHead {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        d: usize,
        d_la: usize,
        d_vcb: usize,
        lang_ids: BTreeSet<u32>,
        bias: bool,
        shared_emb: Option<ParamId>,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w_la = store.add("xtr.w_la", &[d_la, d_vcb], Init::Normal(std), rng);
        let fc = Linear::new(store, "xtr.fc", d_la + d, d_la + d, bias, std, rng);
        let emb_lang = store.add("xtr.emb_lang", &[d_vcb, d_la], Init::Normal(std), rng);
        let emb_sent = shared_emb
            .unwrap_or_else(|| store.add("xtr.emb_sent", &[d_vcb, d], Init::Normal(std), rng));
        let emb_bias = bias.then(|| store.add("xtr.emb_bias", &[d_vcb], Init::Zeros, rng));
        XtrHead {
            d_la,
            d,
            d_vcb,
            w_la,
            fc,
            emb_lang,
            emb_sent,
            emb_bias,
            lang_ids,
        }
    }

    /// Column `lang_id` of `W_la`.
    pub fn language_vector<F: Real>(&self, store: &ParamStore<F>, lang_id: u32) -> Result<Array1<F>> {
        if !self.lang_ids.contains(&lang_id) {
            return Err(EmsError::InvalidInput(format!(
                "id {lang_id} is not a registered language token"
            )));
        }
        Ok(store.mat(self.w_la).column(lang_id as usize).to_owned())
    }

    fn language_rows<F: Real>(&self, store: &ParamStore<F>, lang_ids: &[u32], zero: bool) -> Result<Array2<F>> {
        let mut la = Array2::zeros((lang_ids.len(), self.d_la));
        for (r, &l) in lang_ids.iter().enumerate() {
            let v = self.language_vector(store, l)?;
            if !zero {
                la.row_mut(r).assign(&v);
            }
        }
        Ok(la)
    }

    fn logits<F: Real>(&self, store: &ParamStore<F>, sw: &Array2<F>) -> Array2<F> {
        let mut logits = sw.slice(s![.., ..self.d_la]).dot(&store.mat(self.emb_lang).t());
        logits += &sw.slice(s![.., self.d_la..]).dot(&store.mat(self.emb_sent).t());
        if let Some(b) = self.emb_bias {
            logits += &store.vec(b);
        }
        logits
    }

    /// Log-distributions over the vocabulary, one row per input row.
    pub fn log_distributions<F: Real>(
        &self,
        store: &ParamStore<F>,
        inputs: &ArrayView2<'_, F>,
        lang_ids: &[u32],
        no_lang_tok: bool,
    ) -> Result<Array2<F>> {
        let la = self.language_rows(store, lang_ids, no_lang_tok)?;
        let z = concatenate(Axis(1), &[la.view(), inputs.view()]).expect("row counts agree");
        let sw = self.fc.forward(store, &z.view()).mapv(|a| a * sigmoid(a));
        Ok(log_softmax_rows(&self.logits(store, &sw)))
    }

    /// Sum of KL terms over rows; with `grads`, accumulates `scale ×` the
    /// parameter gradients and returns `scale × ∂loss/∂inputs`.
    pub fn loss<F: Real>(
        &self,
        store: &ParamStore<F>,
        inputs: &ArrayView2<'_, F>,
        lang_ids: &[u32],
        targets: &[TargetDistribution],
        no_lang_tok: bool,
        scale: F,
        grads: Option<&mut Grads<F>>,
    ) -> Result<(F, Option<Array2<F>>)> {
        let la = self.language_rows(store, lang_ids, no_lang_tok)?;
        let z = concatenate(Axis(1), &[la.view(), inputs.view()]).expect("row counts agree");
        let a = self.fc.forward(store, &z.view());
        let sw = a.mapv(|x| x * sigmoid(x));
        let log_q = log_softmax_rows(&self.logits(store, &sw));
        let loss = targets
            .iter()
            .zip(log_q.rows())
            .map(|(p, row)| p.kl_from_log_q(row))
            .sum::<F>();

        let Some(grads) = grads else {
            return Ok((loss, None));
        };
        // ∂KL/∂logits = softmax − p
        let mut g = log_q.mapv(F::exp);
        for (mut row, p) in g.rows_mut().into_iter().zip(targets) {
            for &(w, pw) in p.support() {
                row[w as usize] -= F::of(pw);
            }
        }
        g *= scale;
        let sw_lang = sw.slice(s![.., ..self.d_la]);
        let sw_sent = sw.slice(s![.., self.d_la..]);
        grads.mat_mut(self.emb_lang).scaled_add(F::one(), &g.t().dot(&sw_lang));
        grads.mat_mut(self.emb_sent).scaled_add(F::one(), &g.t().dot(&sw_sent));
        if let Some(b) = self.emb_bias {
            grads.vec_mut(b).scaled_add(F::one(), &g.sum_axis(Axis(0)));
        }
        let dsw = concatenate(
            Axis(1),
            &[
                g.dot(&store.mat(self.emb_lang)).view(),
                g.dot(&store.mat(self.emb_sent)).view(),
            ],
        )
        .expect("column blocks");
        let mut da = dsw;
        Zip::from(&mut da).and(&a).for_each(|d, &x| {
            let sg = sigmoid(x);
            *d *= sg + x * sg * (F::one() - sg);
        });
        let dz = self.fc.backward(store, grads, &z.view(), &da.view());
        if !no_lang_tok {
            let mut dw_la = grads.mat_mut(self.w_la);
            for (r, &l) in lang_ids.iter().enumerate() {
                let mut col = dw_la.column_mut(l as usize);
                col += &dz.slice(s![r, ..self.d_la]);
            }
        }
        Ok((loss, Some(dz.slice(s![.., self.d_la..]).to_owned())))
    }
}

/// Projection head `h(u) = W_1 · relu(W_2 · u)` and the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveHead {
    pub w2: Linear,
    pub w1: Linear,
    pub temperature: f64,
}

impl ContrastiveHead {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        d: usize,
        d_cntrs: usize,
        temperature: f64,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        ContrastiveHead {
            w2: Linear::new(store, "cntrs.w2", d, d, bias, std, rng),
            w1: Linear::new(store, "cntrs.w1", d_cntrs, d, bias, std, rng),
            temperature,
        }
    }

    pub fn project_rows<F: Real>(&self, store: &ParamStore<F>, x: &ArrayView2<'_, F>) -> Array2<F> {
        let r = self.w2.forward(store, x).mapv(|z| z.max(F::zero()));
        self.w1.forward(store, &r.view())
    }

    fn project_backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        x: &ArrayView2<'_, F>,
        dh: &Array2<F>,
    ) -> Array2<F> {
        let pre = self.w2.forward(store, x);
        let r = pre.mapv(|z| z.max(F::zero()));
        let mut dr = self.w1.backward(store, grads, &r.view(), &dh.view());
        Zip::from(&mut dr).and(&pre).for_each(|g, &z| {
            if z <= F::zero() {
                *g = F::zero();
            }
        });
        self.w2.backward(store, grads, x, &dr.view())
    }

    /// Contrastive loss over aligned rows of `u` and `v`. With `grads`,
    /// accumulates `scale ×` gradients and returns `scale × (∂/∂u, ∂/∂v)`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<F: Real>(
        &self,
        store: &ParamStore<F>,
        u: &ArrayView2<'_, F>,
        v: &ArrayView2<'_, F>,
        use_mlp: bool,
        scale: F,
        grads: Option<&mut Grads<F>>,
    ) -> Result<(F, Option<(Array2<F>, Array2<F>)>)> {
        let (hu, hv) = if use_mlp {
            (self.project_rows(store, u), self.project_rows(store, v))
        } else {
            (u.to_owned(), v.to_owned())
        };
        let t = F::of(self.temperature);
        let cos = CosineGrid::new(&hu, &hv)?;
        let (loss, d_cos) = infonce_both_directions(&cos.sim, t);
        let Some(grads) = grads else {
            return Ok((loss, None));
        };
        let (dhu, dhv) = cos.backward(&(d_cos * scale));
        if use_mlp {
            let du = self.project_backward(store, grads, u, &dhu);
            let dv = self.project_backward(store, grads, v, &dhv);
            Ok((loss, Some((du, dv))))
        } else {
            Ok((loss, Some((dhu, dhv))))
        }
    }
}

/// Pairwise cosines of two row sets, keeping the unit vectors for backward.
struct CosineGrid<F> {
    unit_a: Array2<F>,
    unit_b: Array2<F>,
    norm_a: Array1<F>,
    norm_b: Array1<F>,
    sim: Array2<F>,
}

impl<F: Real> CosineGrid<F> {
    fn new(a: &Array2<F>, b: &Array2<F>) -> Result<Self> {
        let normalize = |m: &Array2<F>, side: &str| -> Result<(Array2<F>, Array1<F>)> {
            let norms = m.map_axis(Axis(1), |r| r.iter().map(|&x| x * x).sum::<F>().sqrt());
            if let Some(i) = norms.iter().position(|&n| n == F::zero()) {
                return Err(EmsError::Numerical(format!(
                    "{side} row {i} projects to the zero vector; cosine is undefined"
                )));
            }
            let unit = m / &norms.view().insert_axis(Axis(1));
            Ok((unit, norms))
        };
        let (unit_a, norm_a) = normalize(a, "source")?;
        let (unit_b, norm_b) = normalize(b, "target")?;
        let sim = unit_a.dot(&unit_b.t());
        Ok(CosineGrid {
            unit_a,
            unit_b,
            norm_a,
            norm_b,
            sim,
        })
    }

    fn backward(&self, d_sim: &Array2<F>) -> (Array2<F>, Array2<F>) {
        let project_out = |d_unit: Array2<F>, unit: &Array2<F>, norms: &Array1<F>| {
            let mut out = d_unit;
            for ((mut g, u), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
                let radial = g.iter().zip(u.iter()).map(|(&x, &y)| x * y).sum::<F>();
                Zip::from(&mut g).and(&u).for_each(|gi, &ui| *gi = (*gi - radial * ui) / n);
            }
            out
        };
        let da = project_out(d_sim.dot(&self.unit_b), &self.unit_a, &self.norm_a);
        let db = project_out(d_sim.t().dot(&self.unit_a), &self.unit_b, &self.norm_b);
        (da, db)
    }
}

/// `−Σ_j [log softmax_k(S/T)[j,j] + log softmax_k(Sᵀ/T)[j,j]]` and its
/// gradient with respect to `S`.
pub fn infonce_both_directions<F: Real>(sim: &Array2<F>, t: F) -> (F, Array2<F>) {
    let z = sim / t;
    let row_log = log_softmax_rows(&z);
    let col_log = log_softmax_rows(&z.t().to_owned()).reversed_axes();
    let n = z.nrows();
    let loss = -(0..n).map(|j| row_log[[j, j]] + col_log[[j, j]]).sum::<F>();
    let mut grad = row_log.mapv(F::exp) + col_log.mapv(F::exp);
    for j in 0..n {
        grad[[j, j]] -= F::of(2.0);
    }
    (loss, grad / t)
}

/// `(xtr + cntrs) / |B|` with ablated terms zeroed.
pub fn joint_loss<F: Real>(xtr: F, cntrs: F, batch_size: usize, ablation: &Ablations) -> Result<F> {
    ablation.validate()?;
    if batch_size == 0 {
        return Err(EmsError::InvalidInput("empty batch".into()));
    }
    let xtr = if ablation.no_xtr { F::zero() } else { xtr };
    let cntrs = if ablation.no_cntrs { F::zero() } else { cntrs };
    Ok((xtr + cntrs) / F::from_usize(batch_size).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn target_distribution_counts() {
        let p = target_distribution(&[5, 7, 5], 10).unwrap();
        assert!((p.prob(5) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.prob(7) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.prob(6), 0.0);
        let one = target_distribution(&[3], 10).unwrap();
        assert_eq!(one.dense(), [0., 0., 0., 1., 0., 0., 0., 0., 0., 0.]);
        assert!(matches!(target_distribution(&[], 10), Err(EmsError::InvalidInput(_))));
        assert!(target_distribution(&[10], 10).is_err());
    }

    #[test]
    fn joint_loss_arithmetic_and_ablations() {
        let full = Ablations::default();
        assert_eq!(joint_loss(2.0, 4.0, 2, &full).unwrap(), 3.0);
        let no_xtr = Ablations {
            no_xtr: true,
            ..Ablations::default()
        };
        assert_eq!(joint_loss(2.0, 4.0, 2, &no_xtr).unwrap(), 2.0);
        let no_cntrs = Ablations {
            no_cntrs: true,
            ..Ablations::default()
        };
        assert_eq!(joint_loss(2.0, 4.0, 2, &no_cntrs).unwrap(), 1.0);
        let both = Ablations {
            no_xtr: true,
            no_cntrs: true,
            ..Ablations::default()
        };
        assert!(matches!(joint_loss(2.0, 4.0, 2, &both), Err(EmsError::Config(_))));
    }

    #[test]
    fn ablation_names_parse() {
        let mut a = Ablations::default();
        for n in Ablations::NAMES {
            a.set(n).unwrap();
        }
        assert_eq!(a.active(), Ablations::NAMES);
        assert!(a.set("no_such").is_err());
        let json = serde_json::to_string(&Ablations { share_lemb: true, ..Default::default() }).unwrap();
        assert!(json.contains("\"share_Lemb\":true"));
    }

    #[test]
    fn infonce_two_by_two_hand_value() {
        // cos = I, T = 1: each of the four log-softmax terms is log(e/(e+1))
        let (loss, _) = infonce_both_directions(&array![[1.0, 0.0], [0.0, 1.0]], 1.0f64);
        let expected = 4.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 1.2530).abs() < 1e-3);
    }

    #[test]
    fn infonce_confident_limit_goes_to_zero() {
        let sim = array![[1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
        let (loss, _) = infonce_both_directions(&sim, 0.01f64);
        assert!(loss < 1e-80);
        let (warm, _) = infonce_both_directions(&sim, 1.0f64);
        assert!(warm > loss);
    }

    fn head(bias: bool) -> (ParamStore<f64>, ContrastiveHead) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = ContrastiveHead::new(&mut store, 4, 3, 0.1, bias, 0.5, &mut rng);
        (store, h)
    }

    #[test]
    fn projection_of_zero_is_zero_without_bias() {
        let (store, h) = head(false);
        let out = h.project_rows(&store, &Array2::<f64>::zeros((1, 4)).view());
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn projection_is_positively_homogeneous() {
        let (store, h) = head(false);
        let u = array![[0.3, -1.2, 0.7, 2.0]];
        let base = h.project_rows(&store, &u.view());
        let scaled = h.project_rows(&store, &(&u * 2.5).view());
        for (a, b) in base.iter().zip(scaled.iter()) {
            assert!((a * 2.5 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_kills_negative_inputs_with_identity_weights() {
        let (mut store, h) = head(false);
        *store.get_mut(h.w2.w) = Array2::<f64>::eye(4).into_dyn();
        *store.get_mut(h.w1.w) = Array2::<f64>::eye(4).slice(s![..3, ..]).to_owned().into_dyn();
        let out = h.project_rows(&store, &array![[-1.0, -0.5, -2.0, -3.0]].view());
        assert!(out.iter().all(|&x| x == 0.0));
        let pos = h.project_rows(&store, &array![[1.0, 0.5, 2.0, 3.0]].view());
        assert_eq!(pos, array![[1.0, 0.5, 2.0]]);
    }

    #[test]
    fn zero_projection_is_numerical_error() {
        let (store, h) = head(false);
        let u = Array2::<f64>::zeros((2, 4));
        let v = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let err = h.loss(&store, &u.view(), &v.view(), true, 1.0, None).unwrap_err();
        assert!(matches!(err, EmsError::Numerical(_)));
    }

    #[test]
    fn contrastive_loss_is_invariant_to_joint_row_permutation() {
        let (store, h) = head(true);
        let u = array![[0.1, 0.5, -0.3, 0.9], [1.0, -0.2, 0.4, 0.1], [-0.5, 0.6, 0.2, 0.3]];
        let v = array![[0.2, 0.4, -0.1, 0.8], [0.9, -0.1, 0.5, 0.0], [-0.4, 0.5, 0.1, 0.4]];
        let perm = [2usize, 0, 1];
        let up = u.select(Axis(0), &perm);
        let vp = v.select(Axis(0), &perm);
        let (a, _) = h.loss(&store, &u.view(), &v.view(), true, 1.0, None).unwrap();
        let (b, _) = h.loss(&store, &up.view(), &vp.view(), true, 1.0, None).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
