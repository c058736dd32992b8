use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
    Sigmoid,
    Softmax,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softmax" => Ok(Activation::Softmax),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Numerically stable softmax of one vector (max subtracted before exponentiation).
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = T::one() / total;
    xs.iter_mut().for_each(|x| *x *= inv);
}

pub(crate) fn apply_in_place<T: Scalar>(kind: Activation, data: &mut [T], sample_len: usize) {
    match kind {
        Activation::Relu => data.iter_mut().for_each(|x| {
            if *x < T::zero() {
                *x = T::zero()
            }
        }),
        Activation::Linear => {}
        Activation::Sigmoid => data.iter_mut().for_each(|x| *x = T::one() / (T::one() + (-*x).exp())),
        Activation::Softmax => data.chunks_exact_mut(sample_len).for_each(softmax_in_place),
    }
}

/// Applies `kind` elementwise; softmax normalizes each sample (leading axis) separately.
pub fn activation<T: Scalar>(kind: Activation, input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = input.clone();
    let per = input.len() / input.batch_len();
    apply_in_place(kind, out.data_mut(), per);
    Ok(out)
}

/// Gradient w.r.t. the activation input, expressed through its forward output.
pub fn activation_backward<T: Scalar>(kind: Activation, output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "activation grad {:?} does not match output {:?}",
            grad_out.shape(),
            output.shape()
        )));
    }
    let mut g = grad_out.clone();
    let y = output.data();
    match kind {
        Activation::Relu => g.data_mut().iter_mut().zip(y).for_each(|(g, y)| {
            if *y <= T::zero() {
                *g = T::zero()
            }
        }),
        Activation::Linear => {}
        Activation::Sigmoid => g.data_mut().iter_mut().zip(y).for_each(|(g, y)| *g *= *y * (T::one() - *y)),
        Activation::Softmax => {
            let per = output.len() / output.batch_len();
            for (gs, ys) in g.data_mut().chunks_exact_mut(per).zip(y.chunks_exact(per)) {
                let inner: T = gs.iter().zip(ys).map(|(a, b)| *a * *b).sum();
                for (gi, yi) in gs.iter_mut().zip(ys) {
                    *gi = *yi * (*gi - inner);
                }
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = activation(Activation::Softmax, &Tensor::<f64>::zeros(vec![10])).unwrap();
        for v in y.data() {
            assert!((v - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = activation(Activation::Relu, &Tensor::from_vec(vec![-1.0f32, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_shift_stable() {
        let y = activation(Activation::Softmax, &Tensor::from_vec(vec![1000.0f32, 1000.0])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_per_sample() {
        let x = Tensor::new(vec![2, 2], vec![0.0f64, 0.0, 1.0, 1.0]).unwrap();
        let y = activation(Activation::Softmax, &x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let y = activation(Activation::Sigmoid, &Tensor::from_vec(vec![0.0f64])).unwrap();
        assert_eq!(y.data(), &[0.5]);
    }
}
