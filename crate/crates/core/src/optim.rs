//! Adam with decoupled weight decay and the linear-warmup schedule.

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::tensor::{Grads, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Linear ramp to `base_lr` over `warmup` steps, constant afterwards.
/// Steps are 1-based.
pub fn warmup_lr(base_lr: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        base_lr
    } else {
        base_lr * step as f64 / warmup as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub(crate) m: Vec<ArrayD<F>>,
    pub(crate) v: Vec<ArrayD<F>>,
    pub(crate) t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>, cfg: AdamConfig) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| ArrayD::zeros(store.get(id).raw_dim()))
                .collect()
        };
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[ArrayD<F>], &[ArrayD<F>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(cfg: AdamConfig, m: Vec<ArrayD<F>>, v: Vec<ArrayD<F>>, t: u64) -> Self {
        Adam { cfg, m, v, t }
    }

    /// `θ ← θ − lr·(m̂/(√v̂+ε) + λ·θ)`; the decay term never enters the moments.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>, lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let t = self.t as i32;
        let bc1 = F::of(1.0 - c.beta1.powi(t));
        let bc2 = F::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let eps = F::of(c.eps);
        let lr = F::of(lr);
        let decay = F::of(c.weight_decay);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            Zip::from(store.get_mut(id))
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(grads.get(id))
                .for_each(|theta, m, v, &g| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *theta = *theta - lr * (m_hat / (v_hat.sqrt() + eps) + decay * *theta);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Init;

    /// Scalar Adam written out longhand, decay decoupled.
    fn reference(x0: f64, lr: f64, wd: f64, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        let mut traj = Vec::new();
        for t in 1..=steps {
            let g = grad(x);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * (mh / (vh.sqrt() + eps) + wd * x);
            traj.push(x);
        }
        traj
    }

    fn run(x0: f64, lr: f64, wd: f64, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut store = ParamStore::<f64>::default();
        let id = store.add("x", &[1], Init::Zeros, &mut ChaCha8Rng::seed_from_u64(0));
        store.get_mut(id)[[0]] = x0;
        let mut adam = Adam::new(
            &store,
            AdamConfig {
                weight_decay: wd,
                ..AdamConfig::default()
            },
        );
        let mut grads = store.zeros_like();
        let mut traj = Vec::new();
        for _ in 0..steps {
            let x = store.get(id)[[0]];
            *grads.get_mut(id) = ArrayD::from_elem(vec![1], grad(x));
            adam.step(&mut store, &grads, lr);
            traj.push(store.get(id)[[0]]);
        }
        traj
    }

    #[test]
    fn matches_scalar_reference_over_100_steps() {
        let grad = |x: f64| 2.0 * (x - 3.0);
        for wd in [0.0, 1e-2] {
            let a = reference(-1.0, 0.05, wd, 100, grad);
            let b = run(-1.0, 0.05, wd, 100, grad);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn zero_decay_is_plain_adam() {
        // without decay the trajectory does not depend on where the decay term sits
        let grad = |x: f64| x.sin() + 0.3;
        let plain = run(0.5, 0.01, 0.0, 50, grad);
        let decayed = run(0.5, 0.01, 1e-3, 50, grad);
        assert_ne!(plain, decayed);
        assert_eq!(plain, reference(0.5, 0.01, 0.0, 50, grad));
    }

    #[test]
    fn decay_does_not_enter_moments() {
        let mut store = ParamStore::<f64>::default();
        let id = store.add("x", &[1], Init::Ones, &mut ChaCha8Rng::seed_from_u64(0));
        let mut adam = Adam::new(
            &store,
            AdamConfig {
                weight_decay: 0.5,
                ..AdamConfig::default()
            },
        );
        let grads = store.zeros_like();
        adam.step(&mut store, &grads, 0.1);
        assert_eq!(adam.m[0][[0]], 0.0);
        assert_eq!(adam.v[0][[0]], 0.0);
        assert!((store.get(id)[[0]] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(warmup_lr(3e-4, 200, 200), 3e-4);
        assert_eq!(warmup_lr(3e-4, 200, 100), 1.5e-4);
        assert_eq!(warmup_lr(3e-4, 0, 1), 3e-4);
        assert_eq!(warmup_lr(3e-4, 200, 5000), 3e-4);
        assert!((warmup_lr(1.0, 10_000, 1) - 1e-4).abs() < 1e-18);
    }
}
