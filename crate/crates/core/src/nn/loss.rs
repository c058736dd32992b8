use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Loss with its data term and regularization term kept apart.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub data: f64,
    pub regularization: f64,
}

impl LossValue {
    pub fn data_only(data: f64) -> Self {
        LossValue { total: data, data, regularization: 0.0 }
    }

    pub fn regularization_only(reg: f64) -> Self {
        LossValue { total: reg, data: 0.0, regularization: reg }
    }
}

impl std::ops::Add for LossValue {
    type Output = LossValue;

    fn add(self, rhs: LossValue) -> LossValue {
        let data = self.data + rhs.data;
        let regularization = self.regularization + rhs.regularization;
        LossValue { total: data + regularization, data, regularization }
    }
}

/// Smallest probability fed to `ln` so a saturated softmax gives a finite loss.
const PROB_FLOOR: f64 = 1e-30;

fn nll(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// `−ln(probs[label])` and the fused softmax+cross-entropy gradient
/// w.r.t. the pre-softmax logits, `probs − onehot(label)`.
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, label: usize) -> Result<(LossValue, Tensor<T>)> {
    let k = probs.len();
    if label >= k {
        return Err(Error::Index { index: label, len: k });
    }
    let total: f64 = probs.data().iter().map(|p| p.as_f64()).sum();
    if (total - 1.0).abs() > 1e-6 || probs.data().iter().any(|p| *p < T::zero()) {
        return Err(Error::Domain(format!("probabilities sum to {total}, expected 1")));
    }
    let loss = nll(probs.data()[label].as_f64());
    let mut grad = probs.clone();
    grad.data_mut()[label] -= T::one();
    Ok((LossValue::data_only(loss), grad))
}

/// Batch-mean cross-entropy for `[N,K]` probabilities. The returned logit
/// gradient is scaled by `weight / N`; the loss is unweighted.
pub fn cross_entropy_batch<T: Scalar>(probs: &Tensor<T>, labels: &[usize], weight: f64) -> Result<(f64, Tensor<T>)> {
    let n = labels.len();
    if n == 0 || !probs.len().is_multiple_of(n) {
        return Err(Error::Shape(format!("{} labels for probabilities {:?}", n, probs.shape())));
    }
    let k = probs.len() / n;
    let scale = T::lit(weight / n as f64);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (i, (&label, row)) in labels.iter().zip(grad.data_mut().chunks_exact_mut(k)).enumerate() {
        if label >= k {
            return Err(Error::Index { index: label, len: k });
        }
        loss += nll(probs.data()[i * k + label].as_f64());
        row[label] -= T::one();
        row.iter_mut().for_each(|g| *g *= scale);
    }
    Ok((loss / n as f64, grad))
}

/// Mean squared error over every element and its gradient `(2/M)(o − t)`.
pub fn mse_loss<T: Scalar>(output: &Tensor<T>, target: &Tensor<T>) -> Result<(LossValue, Tensor<T>)> {
    if output.shape() != target.shape() {
        return Err(Error::Shape(format!("mse between {:?} and {:?}", output.shape(), target.shape())));
    }
    let m = output.len() as f64;
    let mut sum = 0.0;
    let scale = T::lit(2.0 / m);
    let mut grad = output.clone();
    for (g, t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - *t;
        sum += d.as_f64() * d.as_f64();
        *g = d * scale;
    }
    Ok((LossValue::data_only(sum / m), grad))
}

/// `lambda · Σ|a|` with subgradient `lambda · sign(a)` (0 at a = 0).
pub fn l1_activity_penalty<T: Scalar>(activations: &Tensor<T>, lambda: f64) -> Result<(LossValue, Tensor<T>)> {
    if lambda < 0.0 {
        return Err(Error::Domain(format!("L1 coefficient must be >= 0, got {lambda}")));
    }
    let l = T::lit(lambda);
    let mut grad = activations.clone();
    let mut sum = 0.0;
    for g in grad.data_mut() {
        sum += g.as_f64().abs();
        *g = if *g > T::zero() {
            l
        } else if *g < T::zero() {
            -l
        } else {
            T::zero()
        };
    }
    Ok((LossValue::regularization_only(lambda * sum), grad))
}
