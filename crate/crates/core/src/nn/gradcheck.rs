//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Layer, LayerSpec};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// A scalar objective over a flat parameter vector.
pub trait Differentiable {
    fn num_params(&self) -> usize;
    fn get(&self, i: usize) -> f64;
    fn set(&mut self, i: usize, v: f64);
    fn loss(&mut self) -> Result<f64>;
    /// Analytic gradient of `loss` at the current parameters.
    fn gradient(&mut self) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    pub skipped: usize,
    pub worst_index: Option<usize>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient with `(L(p+ε) − L(p−ε)) / 2ε` at `probes`
/// seeded random parameter indices. `skip(model, i)` may veto a probe (it is
/// called with the model at its unperturbed parameters).
pub fn finite_difference_check<D: Differentiable>(
    model: &mut D,
    probes: usize,
    epsilon: f64,
    seed: u64,
    mut skip: impl FnMut(&mut D, usize) -> bool,
) -> Result<GradCheckReport> {
    let analytic = model.gradient()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, probes: 0, skipped: 0, worst_index: None };
    let n = model.num_params();
    for _ in 0..probes {
        let i = rng.random_range(0..n);
        if skip(model, i) {
            report.skipped += 1;
            continue;
        }
        let p = model.get(i);
        model.set(i, p + epsilon);
        let up = model.loss()?;
        model.set(i, p - epsilon);
        let down = model.loss()?;
        model.set(i, p);
        let numeric = (up - down) / (2.0 * epsilon);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_index = Some(i);
        }
        report.probes += 1;
    }
    Ok(report)
}

/// A single layer under the objective `Σ r_i · y_i` for a fixed random
/// projection `r`. Parameters are the layer's weights and bias followed by
/// the input entries, so input gradients are checked too.
#[derive(Debug, Clone)]
pub struct LayerObjective {
    pub layer: Layer<f64>,
    pub input: Tensor<f64>,
    projection: Tensor<f64>,
}

impl LayerObjective {
    pub fn new(spec: LayerSpec, input: Tensor<f64>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = Layer::new(spec, &mut rng)?;
        let out = layer.forward(&input)?;
        let projection = Tensor::from_fn(out.shape().to_vec(), |_| rng.random::<f64>() * 2.0 - 1.0);
        Ok(LayerObjective { layer, input, projection })
    }

    /// Gives biases non-zero values so their gradient path is exercised.
    pub fn with_random_bias(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, p) in self.layer.params_mut() {
            if name == "bias" {
                p.value.data_mut().iter_mut().for_each(|b| *b = rng.random::<f64>() - 0.5);
            }
        }
        self
    }

    fn param_len(&self) -> usize {
        self.layer.params().iter().map(|(_, p)| p.value.len()).sum()
    }
}

impl Differentiable for LayerObjective {
    fn num_params(&self) -> usize {
        self.param_len() + self.input.len()
    }

    fn get(&self, mut i: usize) -> f64 {
        for (_, p) in self.layer.params() {
            if i < p.value.len() {
                return p.value.data()[i];
            }
            i -= p.value.len();
        }
        self.input.data()[i]
    }

    fn set(&mut self, mut i: usize, v: f64) {
        for (_, p) in self.layer.params_mut() {
            if i < p.value.len() {
                p.value.data_mut()[i] = v;
                return;
            }
            i -= p.value.len();
        }
        self.input.data_mut()[i] = v;
    }

    fn loss(&mut self) -> Result<f64> {
        let y = self.layer.forward(&self.input)?;
        Ok(y.data().iter().zip(self.projection.data()).map(|(a, b)| a * b).sum())
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        for (_, p) in self.layer.params_mut() {
            p.zero_grad();
        }
        self.layer.forward_train(&self.input)?;
        let gx = self.layer.backward(&self.projection, true)?.expect("input gradient");
        let mut out: Vec<f64> = Vec::with_capacity(self.num_params());
        for (_, p) in self.layer.params() {
            out.extend_from_slice(p.grad.data());
        }
        out.extend_from_slice(gx.data());
        Ok(out)
    }
}
