//! Trainable parameters and bias-corrected Adam.

use alloc::string::String;

use crate::rng::{uniform, SeedRng};
use crate::tensor::{NumericsError, Tensor};

/// A weight tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
    steps: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let (r, c) = value.shape();
        Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            steps: 0,
        }
    }

    /// Uniform init on `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`; `fan_in` is the
    /// input width, i.e. the row count of a weight applied as `x @ w`.
    pub fn fan_in_uniform(
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SeedRng,
    ) -> Self {
        let bound = 1.0 / libm::sqrtf(fan_in.max(1) as f32);
        let value = Tensor::from_fn(fan_in, fan_out, |_, _| uniform(rng, -bound, bound));
        Parameter::new(name, value)
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate_grad(&mut self, g: &Tensor) -> Result<(), NumericsError> {
        self.grad.add_scaled(g, 1.0)
    }

    /// Replaces the value, keeping optimizer state. Used to restore the
    /// best-validation snapshot after training.
    pub fn restore_value(&mut self, value: Tensor) {
        debug_assert_eq!(value.shape(), self.value.shape());
        self.value = value;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1.0e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1.0e-8,
        }
    }
}

impl OptimConfig {
    pub fn with_lr(lr: f32) -> Self {
        OptimConfig {
            lr,
            ..OptimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NumericsError::EmptyInput { op: "adam config" })
        }
    }
}

/// One bias-corrected Adam update per parameter; gradients are zeroed after a
/// successful step. A non-finite gradient entry aborts before any value moves.
pub fn adam_step(params: &mut [&mut Parameter], cfg: &OptimConfig) -> Result<(), NumericsError> {
    cfg.validate()?;
    for p in params.iter() {
        if !p.grad.is_finite() {
            return Err(NumericsError::NonFiniteGradient {
                what: "adam_step input",
            });
        }
    }
    for p in params.iter_mut() {
        p.steps += 1;
        let t = p.steps;
        let b1 = cfg.beta1 as f64;
        let b2 = cfg.beta2 as f64;
        let corr1 = 1.0 - libm::pow(b1, t as f64);
        let corr2 = 1.0 - libm::pow(b2, t as f64);
        let lr = cfg.lr as f64;
        let eps = cfg.eps as f64;
        let n = p.value.data().len();
        for i in 0..n {
            let g = p.grad.data()[i] as f64;
            let m = b1 * p.m.data()[i] as f64 + (1.0 - b1) * g;
            let v = b2 * p.v.data()[i] as f64 + (1.0 - b2) * g * g;
            p.m.data_mut()[i] = m as f32;
            p.v.data_mut()[i] = v as f32;
            let m_hat = m / corr1;
            let v_hat = v / corr2;
            let w = p.value.data()[i] as f64 - lr * m_hat / (libm::sqrt(v_hat) + eps);
            p.value.data_mut()[i] = w as f32;
        }
        p.zero_grad();
    }
    Ok(())
}
