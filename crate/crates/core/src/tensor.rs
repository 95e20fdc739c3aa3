//! Scalar abstraction and the named parameter store shared by every module.
//!
//! Training runs in `f32`; gradient checks instantiate the same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, IxDyn};
use ndarray::{Ix1, Ix2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<ArrayD<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        let tensor = match init {
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::Ones => ArrayD::ones(IxDyn(shape)),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                ArrayD::from_shape_simple_fn(IxDyn(shape), || F::of(normal.sample(rng)))
            }
        };
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.tensors[id.0]
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, F> {
        self.tensors[id.0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("parameter is a matrix")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, F> {
        self.tensors[id.0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("parameter is a vector")
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(ArrayD::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn zeros_like(&self) -> Grads<F> {
        Grads {
            tensors: self
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    /// Same parameters converted to another scalar type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|x| G::of(x.as_f64())))
                .collect(),
        }
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<ArrayD<F>>) -> Self {
        ParamStore { names, tensors }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Gradient accumulators mirroring a [`ParamStore`] shape for shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<F> {
    tensors: Vec<ArrayD<F>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.tensors[id.0]
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        self.tensors[id.0]
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("gradient is a matrix")
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        self.tensors[id.0]
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("gradient is a vector")
    }

    pub fn tensors(&self) -> &[ArrayD<F>] {
        &self.tensors
    }

    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(F::zero());
        }
    }

    pub fn global_norm(&self) -> F {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|&g| g * g)
            .sum::<F>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        for t in &mut self.tensors {
            t.mapv_inplace(|g| g * factor);
        }
    }
}

/// Row-wise log-softmax, computed through the max-shifted log-sum-exp.
pub fn log_softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

pub fn softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    log_softmax_rows(logits).mapv(F::exp)
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn l2_norm<F: Real>(v: ArrayView1<'_, F>) -> F {
    v.iter().map(|&x| x * x).sum::<F>().sqrt()
}

pub fn dot<F: Real>(a: ArrayView1<'_, F>, b: ArrayView1<'_, F>) -> F {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

/// `x · wᵀ (+ b)` for a row-major batch `x` (n×in) and weight `w` (out×in).
pub fn affine<F: Real>(x: &ArrayView2<'_, F>, w: &ArrayView2<'_, F>, b: Option<ArrayView1<'_, F>>) -> Array2<F> {
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        y += &b;
    }
    y
}

pub fn to_f64_vec<F: Real>(v: &Array1<F>) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}
