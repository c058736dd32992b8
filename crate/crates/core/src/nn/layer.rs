use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::activation::{activation, activation_backward, Activation};
use crate::nn::conv::{self, ConvGeometry};
use crate::nn::dense;
use crate::nn::pool::{maxpool2d_backward, maxpool2d_padded, PoolGeometry};
use crate::tensor::{Scalar, Tensor};

/// Hyperparameters of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, filters: usize, kernel: usize, stride: usize, padding: usize },
    Maxpool2d { window: usize, stride: usize, padding: usize },
    Dense { inputs: usize, units: usize },
    Relu,
    Linear,
    Sigmoid,
    Softmax,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, filters: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d { in_channels, filters, kernel, stride, padding }
    }

    pub fn pool(window: usize, stride: usize) -> Self {
        LayerSpec::Maxpool2d { window, stride, padding: 0 }
    }

    pub fn dense(inputs: usize, units: usize) -> Self {
        LayerSpec::Dense { inputs, units }
    }

    pub fn activation(kind: Activation) -> Self {
        match kind {
            Activation::Relu => LayerSpec::Relu,
            Activation::Linear => LayerSpec::Linear,
            Activation::Sigmoid => LayerSpec::Sigmoid,
            Activation::Softmax => LayerSpec::Softmax,
        }
    }

    pub fn as_activation(&self) -> Option<Activation> {
        match self {
            LayerSpec::Relu => Some(Activation::Relu),
            LayerSpec::Linear => Some(Activation::Linear),
            LayerSpec::Sigmoid => Some(Activation::Sigmoid),
            LayerSpec::Softmax => Some(Activation::Softmax),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv2d { in_channels, filters, kernel, stride, .. } => {
                in_channels >= 1 && filters >= 1 && kernel >= 1 && stride >= 1
            }
            LayerSpec::Maxpool2d { window, stride, .. } => window >= 1 && stride >= 1,
            LayerSpec::Dense { inputs, units } => inputs >= 1 && units >= 1,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid layer hyperparameters: {self:?}")))
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { in_channels, filters, kernel, stride, padding } => {
                let (_, g) = ConvGeometry::new(input, &[filters, in_channels, kernel, kernel], stride, padding)?;
                Ok(vec![g.c_out, g.oh, g.ow])
            }
            LayerSpec::Maxpool2d { window, stride, padding } => {
                let (_, g) = PoolGeometry::new(input, window, stride, padding)?;
                Ok(vec![g.channels, g.oh, g.ow])
            }
            LayerSpec::Dense { inputs, units } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(Error::Shape(format!("dense expects {inputs} inputs, got {input:?}")));
                }
                Ok(vec![units])
            }
            _ => Ok(input.to_vec()),
        }
    }

    /// Multiply-accumulate operations for one sample of the given input shape.
    pub fn macs(&self, input: &[usize]) -> Result<u64> {
        Ok(match *self {
            LayerSpec::Conv2d { in_channels, kernel, .. } => {
                let out = self.output_shape(input)?;
                (out.iter().product::<usize>() * in_channels * kernel * kernel) as u64
            }
            LayerSpec::Dense { inputs, units } => (inputs * units) as u64,
            _ => 0,
        })
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Glorot-uniform sample in `±sqrt(6 / (fan_in + fan_out))`, drawn in f64 so f32
/// and f64 networks built from one seed hold the same values.
fn glorot<T: Scalar, R: Rng>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(limit * (2.0 * rng.random::<f64>() - 1.0)))
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    input_shape: Vec<usize>,
    batch: usize,
    geom: ConvGeometry,
    cols: Vec<T>,
}

#[derive(Debug, Clone)]
enum Cache<T> {
    Conv(ConvCache<T>),
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Dense { input: Tensor<T> },
    Activation { output: Tensor<T> },
}

/// One layer with its parameters and (while training) its backward cache.
#[derive(Debug, Clone)]
pub struct Layer<T = f32> {
    spec: LayerSpec,
    weight: Option<Param<T>>,
    bias: Option<Param<T>>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Layer<T> {
    pub fn new<R: Rng>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (weight, bias) = match spec {
            LayerSpec::Conv2d { in_channels, filters, kernel, .. } => {
                let w = glorot(
                    vec![filters, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    filters * kernel * kernel,
                    rng,
                );
                (Some(Param::new(w)), Some(Param::new(Tensor::zeros(vec![filters]))))
            }
            LayerSpec::Dense { inputs, units } => {
                let w = glorot(vec![units, inputs], inputs, units, rng);
                (Some(Param::new(w)), Some(Param::new(Tensor::zeros(vec![units]))))
            }
            _ => (None, None),
        };
        Ok(Layer { spec, weight, bias, cache: None })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weight(&self) -> Option<&Param<T>> {
        self.weight.as_ref()
    }

    pub fn bias(&self) -> Option<&Param<T>> {
        self.bias.as_ref()
    }

    /// `("weight", p)` and `("bias", p)` for parameterized layers.
    pub fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        let mut out = Vec::new();
        if let Some(w) = &self.weight {
            out.push(("weight", w));
        }
        if let Some(b) = &self.bias {
            out.push(("bias", b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        let mut out = Vec::new();
        if let Some(w) = &mut self.weight {
            out.push(("weight", w));
        }
        if let Some(b) = &mut self.bias {
            out.push(("bias", b));
        }
        out
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        let cast = |p: &Param<T>| Param { value: p.value.cast(), grad: p.grad.cast() };
        Layer {
            spec: self.spec.clone(),
            weight: self.weight.as_ref().map(cast),
            bias: self.bias.as_ref().map(cast),
            cache: None,
        }
    }

    fn wb(&self) -> (&Tensor<T>, &Tensor<T>) {
        // Parameterized specs always own both tensors.
        (&self.weight.as_ref().expect("weight").value, &self.bias.as_ref().expect("bias").value)
    }

    /// Inference forward pass; leaves no cache.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.spec {
            LayerSpec::Conv2d { stride, padding, .. } => {
                let (w, b) = self.wb();
                conv::conv2d_forward(x, w, b, stride, padding)
            }
            LayerSpec::Maxpool2d { window, stride, padding } => Ok(maxpool2d_padded(x, window, stride, padding)?.0),
            LayerSpec::Dense { .. } => {
                let (w, b) = self.wb();
                dense::dense_forward(x, w, b)
            }
            _ => activation(self.spec.as_activation().expect("activation"), x),
        }
    }

    /// Training forward pass; caches what `backward` needs.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.spec {
            LayerSpec::Conv2d { stride, padding, .. } => {
                let (w, b) = self.wb();
                let (batch, g) = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
                let cl = g.patch_len() * g.positions();
                let mut cols = vec![T::zero(); batch * cl];
                let mut out = vec![T::zero(); batch * g.out_len()];
                for n in 0..batch {
                    let xs = &x.data()[n * g.in_len()..(n + 1) * g.in_len()];
                    conv::conv_sample(
                        &g,
                        xs,
                        w.data(),
                        b.data(),
                        &mut cols[n * cl..(n + 1) * cl],
                        &mut out[n * g.out_len()..(n + 1) * g.out_len()],
                    );
                }
                let shape = if x.rank() == 4 { vec![batch, g.c_out, g.oh, g.ow] } else { vec![g.c_out, g.oh, g.ow] };
                self.cache = Some(Cache::Conv(ConvCache { input_shape: x.shape().to_vec(), batch, geom: g, cols }));
                Tensor::new(shape, out)
            }
            LayerSpec::Maxpool2d { window, stride, padding } => {
                let (y, argmax) = maxpool2d_padded(x, window, stride, padding)?;
                self.cache = Some(Cache::Pool { input_shape: x.shape().to_vec(), argmax });
                Ok(y)
            }
            LayerSpec::Dense { .. } => {
                let y = self.forward(x)?;
                self.cache = Some(Cache::Dense { input: x.clone() });
                Ok(y)
            }
            _ => {
                let y = self.forward(x)?;
                self.cache = Some(Cache::Activation { output: y.clone() });
                Ok(y)
            }
        }
    }

    /// Consumes the forward cache, accumulates parameter gradients, and returns
    /// the gradient w.r.t. the layer input when `need_input_grad` is set.
    pub fn backward(&mut self, grad_out: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("backward called on {:?} without a cached forward", self.spec)))?;
        match cache {
            Cache::Conv(c) => {
                let g = c.geom;
                if grad_out.len() != c.batch * g.out_len() {
                    return Err(Error::Shape(format!("conv grad {:?} does not match output", grad_out.shape())));
                }
                let cl = g.patch_len() * g.positions();
                let w = self.weight.as_mut().expect("weight");
                let b = self.bias.as_mut().expect("bias");
                let mut gx = need_input_grad.then(|| vec![T::zero(); c.batch * g.in_len()]);
                let mut gcols = vec![T::zero(); if need_input_grad { cl } else { 0 }];
                for n in 0..c.batch {
                    let go = &grad_out.data()[n * g.out_len()..(n + 1) * g.out_len()];
                    conv::accumulate_param_grads(
                        &g,
                        go,
                        &c.cols[n * cl..(n + 1) * cl],
                        w.grad.data_mut(),
                        b.grad.data_mut(),
                    );
                    if let Some(gx) = gx.as_mut() {
                        conv::input_grad(
                            &g,
                            go,
                            w.value.data(),
                            &mut gcols,
                            &mut gx[n * g.in_len()..(n + 1) * g.in_len()],
                        );
                    }
                }
                gx.map(|d| Tensor::new(c.input_shape, d)).transpose()
            }
            Cache::Pool { input_shape, argmax } => {
                if !need_input_grad {
                    return Ok(None);
                }
                maxpool2d_backward(grad_out, &argmax, &input_shape).map(Some)
            }
            Cache::Dense { input } => {
                let LayerSpec::Dense { inputs, units } = self.spec else { unreachable!() };
                let batch = input.len() / inputs;
                if grad_out.len() != batch * units {
                    return Err(Error::Shape(format!("dense grad {:?} does not match output", grad_out.shape())));
                }
                let w = self.weight.as_mut().expect("weight");
                let b = self.bias.as_mut().expect("bias");
                dense::accumulate_param_grads(
                    grad_out.data(),
                    input.data(),
                    batch,
                    inputs,
                    units,
                    w.grad.data_mut(),
                    b.grad.data_mut(),
                );
                if !need_input_grad {
                    return Ok(None);
                }
                let mut gx = vec![T::zero(); input.len()];
                dense::input_grad(grad_out.data(), w.value.data(), batch, inputs, units, &mut gx);
                Tensor::new(input.shape().to_vec(), gx).map(Some)
            }
            Cache::Activation { output } => {
                if !need_input_grad {
                    return Ok(None);
                }
                let kind = self.spec.as_activation().expect("activation");
                activation_backward(kind, &output, grad_out).map(Some)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = Layer::<f32>::new(LayerSpec::conv(1, 2, 3, 1, 1), &mut rng).unwrap();
        let g = Tensor::zeros(vec![2, 4, 4]);
        assert!(matches!(l.backward(&g, true), Err(Error::State(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(LayerSpec::conv(1, 0, 3, 1, 0).validate().is_err());
        assert!(LayerSpec::conv(1, 2, 3, 0, 0).validate().is_err());
        assert!(LayerSpec::pool(0, 2).validate().is_err());
        assert!(LayerSpec::dense(3, 0).validate().is_err());
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Layer::<f32>::new(LayerSpec::dense(10, 20), &mut rng).unwrap();
        let lim = (6.0f32 / 30.0).sqrt();
        assert!(l.weight().unwrap().value.data().iter().all(|w| w.abs() <= lim));
        assert!(l.bias().unwrap().value.data().iter().all(|b| *b == 0.0));
    }

    #[test]
    fn train_and_inference_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut l = Layer::<f64>::new(LayerSpec::conv(2, 3, 3, 2, 1), &mut rng).unwrap();
        let x = Tensor::from_fn(vec![2, 2, 7, 7], |i| (i as f64 * 0.3).sin());
        assert_eq!(l.forward(&x).unwrap(), l.forward_train(&x).unwrap());
    }
}
