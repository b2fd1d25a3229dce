//! AdamW with decoupled weight decay and the warmup learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear ramp from `warmup_lr` to `lr` over `warmup_steps`, then constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub lr: f64,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
}

impl WarmupSchedule {
    pub fn new(lr: f64, warmup_lr: f64, warmup_steps: usize) -> Result<Self> {
        if !(lr > 0.0 && warmup_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if warmup_lr > lr {
            return Err(Error::Config(format!(
                "warmup_lr {warmup_lr} exceeds lr {lr}"
            )));
        }
        Ok(Self {
            lr,
            warmup_lr,
            warmup_steps,
        })
    }

    /// Learning rate used for the update at `step` (0-based).
    pub fn lr_at_step(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            return self.lr;
        }
        let frac = step as f64 / self.warmup_steps as f64;
        self.warmup_lr + (self.lr - self.warmup_lr) * frac
    }
}

/// Warmup length used when a config leaves it unset: 5% of all steps.
pub fn default_warmup_steps(total_steps: usize) -> usize {
    total_steps / 20
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adaptive moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. Parameters without a gradient are treated as having a
    /// zero gradient (their moments still decay, weight decay still applies).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), self.first.len(), "gradient count");
        self.steps += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.steps as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.steps as i32));
        let (lr, eps, wd) = (T::lit(lr), T::lit(c.eps), T::lit(c.weight_decay));
        let one = T::one();
        for (((param, grad), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let g = grad.as_ref().map(Tensor::data);
            let (pd, md, vd) = (param.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] = pd[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * pd[i]);
            }
        }
    }
}
