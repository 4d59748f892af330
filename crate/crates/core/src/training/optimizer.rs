//! Adaptive-moment optimizer with bias correction, linear warmup, an optional
//! per-epoch exponential decay and global-norm gradient clipping.

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParameterStore};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightDecay {
    /// Shrink parameters directly, outside the moment estimates.
    Decoupled,
    /// Add `decay · θ` to the gradient.
    L2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecay,
    /// Clip the global gradient norm to this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            decay_mode: WeightDecay::Decoupled,
            clip_norm: Some(1.0),
        }
    }
}

/// Linear warmup from `warmup_lr` to `base_lr` over `warmup_steps`, then
/// `base_lr · gamma^epoch` when a decay factor is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
    pub gamma: Option<f64>,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base_lr: lr,
            warmup_lr: lr,
            warmup_steps: 0,
            gamma: None,
            steps_per_epoch: 1,
        }
    }

    pub fn rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return self.warmup_lr + (self.base_lr - self.warmup_lr) * t;
        }
        match self.gamma {
            Some(g) => self.base_lr * g.powi((step / self.steps_per_epoch.max(1)) as i32),
            None => self.base_lr,
        }
    }
}

pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub schedule: Schedule,
    /// Learning-rate multiplier per parameter group.
    group_scale: [f64; ParamGroup::ALL.len()],
    step: usize,
    first: Vec<Option<Matrix<T>>>,
    second: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, schedule: Schedule, params: usize) -> Self {
        Self {
            config,
            schedule,
            group_scale: [1.0; ParamGroup::ALL.len()],
            step: 0,
            first: vec![None; params],
            second: vec![None; params],
        }
    }

    pub fn set_group_scale(&mut self, group: ParamGroup, scale: f64) {
        self.group_scale[group as usize] = scale;
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate the next step will use for the base group.
    pub fn current_rate(&self) -> f64 {
        self.schedule.rate(self.step)
    }

    /// Apply one update to every parameter that has a gradient. Returns the
    /// learning rate used.
    pub fn step(&mut self, store: &mut ParameterStore<T>, mut grads: Gradients<T>) -> Result<f64> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.get(id).name.clone()));
            }
        }
        if let Some(max) = self.config.clip_norm {
            let norm = grads.global_norm();
            if norm > max {
                grads.scale(T::of(max / norm));
            }
        }
        let lr = self.schedule.rate(self.step);
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let wd = self.config.weight_decay;
        let (b1t, b2t, eps) = (T::of(b1), T::of(b2), T::of(self.config.eps));
        for (id, g) in grads.iter() {
            let i = id.index();
            let rate = lr * self.group_scale[store.get(id).group as usize];
            let theta = store.value_mut(id);
            let m = self.first[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.second[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            if self.config.decay_mode == WeightDecay::Decoupled && wd != 0.0 {
                theta.scale(T::of(1.0 - rate * wd));
            }
            let l2 = if self.config.decay_mode == WeightDecay::L2 { T::of(wd) } else { T::zero() };
            let (step_size, c2t) = (T::of(rate / c1), T::of(c2));
            let th = theta.data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                let gk = gk + l2 * th[k];
                let mk = &mut m.data_mut()[k];
                *mk = b1t * *mk + (T::one() - b1t) * gk;
                let mk = *mk;
                let vk = &mut v.data_mut()[k];
                *vk = b2t * *vk + (T::one() - b2t) * gk * gk;
                let denom = (*vk / c2t).sqrt() + eps;
                th[k] -= step_size * mk / denom;
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(v: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.register("w", ParamGroup::Adapter, 1, 1, Init::Zeros, &mut ChaCha8Rng::seed_from_u64(0));
        s.value_mut(crate::params::ParamId(0)).data_mut()[0] = v;
        s
    }

    /// Gradient of `0.5 (c·w)²`, which is `c²·w`.
    fn grads_of(store: &ParameterStore<f64>, c: f64) -> Gradients<f64> {
        let mut g = Graph::full(store);
        let w = g.param(crate::params::ParamId(0));
        let k = g.constant(Matrix::from_vec(1, 1, vec![c]));
        let p = g.matmul(w, k);
        let t = Matrix::from_vec(1, 1, vec![0.0]);
        let loss = g.scaled_squared_error(p, t, 0.5);
        g.backward(loss)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = scalar_store(0.0);
        let mut opt = Adam::new(AdamConfig::default(), Schedule::constant(0.1), 1);
        for _ in 0..3 {
            let g = grads_of(&store, 1.0);
            opt.step(&mut store, g).unwrap();
        }
        assert_eq!(store.value(crate::params::ParamId(0)).data()[0], 0.0);
    }

    #[test]
    fn two_steps_match_hand_recursion() {
        let (w0, c, lr) = (0.7, 1.3, 0.05);
        let cfg = AdamConfig {
            clip_norm: None,
            ..Default::default()
        };
        let mut store = scalar_store(w0);
        let mut opt = Adam::new(cfg, Schedule::constant(lr), 1);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for t in 1..=2 {
            let g = c * c * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            let grads = grads_of(&store, c);
            opt.step(&mut store, grads).unwrap();
        }
        assert!((store.value(crate::params::ParamId(0)).data()[0] - w).abs() < 1e-12);
    }

    #[test]
    fn warmup_starts_at_floor_and_reaches_base() {
        let s = Schedule {
            base_lr: 3e-4,
            warmup_lr: 1e-6,
            warmup_steps: 100,
            gamma: None,
            steps_per_epoch: 10,
        };
        assert_eq!(s.rate(0), 1e-6);
        assert_eq!(s.rate(100), 3e-4);
        assert!(s.rate(50) > 1e-6 && s.rate(50) < 3e-4);
        let d = Schedule {
            gamma: Some(0.95),
            warmup_steps: 0,
            ..s
        };
        assert!((d.rate(25) - 3e-4 * 0.95f64.powi(2)).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut store = scalar_store(f64::NAN);
        let mut opt = Adam::new(AdamConfig::default(), Schedule::constant(0.1), 1);
        let g = grads_of(&store, 1.0);
        let err = opt.step(&mut store, g).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
    }
}
