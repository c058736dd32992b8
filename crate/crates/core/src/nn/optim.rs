//! SGD (with optional classical momentum) and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layer::Param;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum: 0.0 }
    }

    /// SGD lr 0.01 with 0.9 momentum, used for the classifiers.
    pub fn classifier_default() -> Self {
        OptimizerConfig::Sgd { lr: 0.01, momentum: 0.9 }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn adam_default() -> Self {
        Self::adam(1e-3)
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

fn check_shapes<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `θ ← θ − lr·g`.
pub fn sgd_step<T: Scalar>(params: &mut Tensor<T>, grads: &Tensor<T>, lr: f64) -> Result<()> {
    check_shapes(params, grads, "sgd parameter/gradient")?;
    let lr = T::lit(lr);
    for (p, g) in params.data_mut().iter_mut().zip(grads.data()) {
        *p -= lr * *g;
    }
    Ok(())
}

/// Per-parameter Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        AdamState { m: Tensor::zeros(shape.to_vec()), v: Tensor::zeros(shape.to_vec()), step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut Tensor<T>,
    grads: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_shapes(params, grads, "adam parameter/gradient")?;
    check_shapes(params, &state.m, "adam first moment")?;
    check_shapes(params, &state.v, "adam second moment")?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let (ob1, ob2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
    let (inv_c1, inv_c2) = (T::lit(1.0 / c1), T::lit(1.0 / c2));
    let (lr, eps) = (T::lit(lr), T::lit(eps));
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, (p, g)) in params.data_mut().iter_mut().zip(grads.data()).enumerate() {
        m[i] = b1 * m[i] + ob1 * *g;
        v[i] = b2 * v[i] + ob2 * *g * *g;
        let m_hat = m[i] * inv_c1;
        let v_hat = v[i] * inv_c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum Slot<T> {
    Velocity(Tensor<T>),
    Adam(AdamState<T>),
}

/// Optimizer over an ordered parameter list; slot `i` belongs to parameter `i`.
#[derive(Debug, Clone)]
pub struct Optimizer<T = f32> {
    config: OptimizerConfig,
    slots: Vec<Slot<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer { config, slots: Vec::new(), steps: 0 }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match &mut self.config {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr = new_lr,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| match self.config {
                    OptimizerConfig::Sgd { .. } => Slot::Velocity(Tensor::zeros(p.value.shape().to_vec())),
                    OptimizerConfig::Adam { .. } => Slot::Adam(AdamState::new(p.value.shape())),
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.slots.len(),
                params.len()
            )));
        }
        for (p, slot) in params.iter_mut().zip(&mut self.slots) {
            match (self.config, slot) {
                (OptimizerConfig::Sgd { lr, momentum }, Slot::Velocity(v)) => {
                    check_shapes(&p.value, &p.grad, "sgd parameter/gradient")?;
                    check_shapes(&p.value, v, "sgd velocity")?;
                    if momentum == 0.0 {
                        sgd_step(&mut p.value, &p.grad, lr)?;
                    } else {
                        let (mu, lr) = (T::lit(momentum), T::lit(lr));
                        for ((w, g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
                            *vel = mu * *vel - lr * *g;
                            *w += *vel;
                        }
                    }
                }
                (OptimizerConfig::Adam { lr, beta1, beta2, eps }, Slot::Adam(state)) => {
                    adam_step(&mut p.value, &p.grad, state, lr, beta1, beta2, eps)?;
                }
                _ => unreachable!("slot kind follows optimizer kind"),
            }
        }
        self.steps += 1;
        Ok(())
    }
}
