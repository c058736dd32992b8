//! Layer graph with a main trunk and optional early-exit branches.
//!
//! Exit ids are 1-based: branches are exits `1..=branches.len()` in tap order
//! and the trunk tail is the final exit. A branch with tap `p` consumes the
//! trunk activation after the first `p` trunk layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetId;
use crate::error::{Error, Result};
use crate::nn::{maxpool2d_padded, Activation, Layer, LayerSpec, Param};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    BranchyLenet,
    Lenet,
    Lightweight,
    ConvertingAutoencoder,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::BranchyLenet => "branchy-lenet",
            Architecture::Lenet => "lenet",
            Architecture::Lightweight => "lightweight",
            Architecture::ConvertingAutoencoder => "converting-autoencoder",
        }
    }

    pub fn is_classifier(self) -> bool {
        !matches!(self, Architecture::ConvertingAutoencoder)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub architecture: Architecture,
    #[serde(default)]
    pub dataset: Option<DatasetId>,
    pub seed: u64,
    #[serde(default)]
    pub epochs: usize,
    /// Output activation of a converting autoencoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_activation: Option<Activation>,
    #[serde(default)]
    pub fine_tuned: bool,
}

impl NetworkMeta {
    pub fn new(architecture: Architecture, seed: u64) -> Self {
        NetworkMeta { architecture, dataset: None, seed, epochs: 0, output_activation: None, fine_tuned: false }
    }
}

#[derive(Debug, Clone)]
pub struct Branch<T = f32> {
    pub tap: usize,
    pub layers: Vec<Layer<T>>,
}

/// Sign of every ReLU input and winning index of every max-pool window.
/// Inputs with equal patterns lie on the same linear piece of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPattern {
    pub relu_signs: Vec<bool>,
    pub pool_winners: Vec<usize>,
    pub min_relu_margin: f64,
}

impl ActivationPattern {
    pub fn same_piece(&self, other: &ActivationPattern) -> bool {
        self.relu_signs == other.relu_signs && self.pool_winners == other.pool_winners
    }
}

/// Outputs of a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// Per-exit outputs, exit 1 first.
    pub exits: Vec<Tensor<T>>,
    /// Trunk activations at the requested positions, in request order.
    pub taps: Vec<Tensor<T>>,
}

const BRANCH_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    pub meta: NetworkMeta,
    input_shape: Vec<usize>,
    trunk: Vec<Layer<T>>,
    branches: Vec<Branch<T>>,
}

impl<T: Scalar> Network<T> {
    /// Builds and Glorot-initializes a network. Trunk weights depend only on
    /// `meta.seed`, so adding branches never changes them.
    pub fn build(
        meta: NetworkMeta,
        input_shape: Vec<usize>,
        trunk: Vec<LayerSpec>,
        branches: Vec<(usize, Vec<LayerSpec>)>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
        let trunk = trunk.into_iter().map(|s| Layer::new(s, &mut rng)).collect::<Result<Vec<_>>>()?;
        let branches = branches
            .into_iter()
            .enumerate()
            .map(|(i, (tap, specs))| {
                let mut rng = ChaCha8Rng::seed_from_u64(meta.seed ^ BRANCH_SEED_SALT.wrapping_mul(i as u64 + 1));
                let layers = specs.into_iter().map(|s| Layer::new(s, &mut rng)).collect::<Result<Vec<_>>>()?;
                Ok(Branch { tap, layers })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Network { meta, input_shape, trunk, branches };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.trunk.is_empty() {
            return Err(Error::Architecture("network has no trunk layers".into()));
        }
        let mut prev = 0;
        for b in &self.branches {
            if b.tap == 0 || b.tap >= self.trunk.len() || b.tap <= prev {
                return Err(Error::Architecture(format!(
                    "branch taps must strictly increase inside the trunk (got {})",
                    b.tap
                )));
            }
            if b.layers.is_empty() {
                return Err(Error::Architecture("empty branch".into()));
            }
            prev = b.tap;
        }
        for exit in 1..=self.exit_count() {
            let shape = self.exit_output_shape(exit)?;
            if self.meta.architecture.is_classifier() {
                let last = self.exit_layers(exit).last().map(|l| l.spec().clone());
                if last != Some(LayerSpec::Softmax) || shape != [10] {
                    return Err(Error::Architecture(format!(
                        "classifier exit {exit} must end in a 10-way softmax (output {shape:?})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn trunk(&self) -> &[Layer<T>] {
        &self.trunk
    }

    pub fn branches(&self) -> &[Branch<T>] {
        &self.branches
    }

    pub fn exit_count(&self) -> usize {
        self.branches.len() + 1
    }

    pub fn final_exit(&self) -> usize {
        self.exit_count()
    }

    /// `(tap position, head layer specs)` for every exit; the final exit's
    /// position is the trunk length and its head is empty.
    pub fn exit_points(&self) -> Vec<(usize, Vec<LayerSpec>)> {
        let mut v: Vec<_> =
            self.branches.iter().map(|b| (b.tap, b.layers.iter().map(|l| l.spec().clone()).collect())).collect();
        v.push((self.trunk.len(), Vec::new()));
        v
    }

    fn exit_layers(&self, exit: usize) -> &[Layer<T>] {
        if exit == self.final_exit() {
            &self.trunk
        } else {
            &self.branches[exit - 1].layers
        }
    }

    fn check_exit(&self, exit: usize) -> Result<()> {
        if exit == 0 || exit > self.exit_count() {
            return Err(Error::Index { index: exit, len: self.exit_count() });
        }
        Ok(())
    }

    /// Layers evaluated from the input up to `exit`, in order.
    pub fn path_specs(&self, exit: usize) -> Result<Vec<LayerSpec>> {
        self.check_exit(exit)?;
        Ok(if exit == self.final_exit() {
            self.trunk.iter().map(|l| l.spec().clone()).collect()
        } else {
            let b = &self.branches[exit - 1];
            self.trunk[..b.tap].iter().chain(&b.layers).map(|l| l.spec().clone()).collect()
        })
    }

    pub fn exit_output_shape(&self, exit: usize) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for spec in self.path_specs(exit)? {
            shape = spec.output_shape(&shape)?;
        }
        Ok(shape)
    }

    /// Multiply-accumulates for one sample along the path to `exit`.
    pub fn macs_to_exit(&self, exit: usize) -> Result<u64> {
        let mut shape = self.input_shape.clone();
        let mut total = 0;
        for spec in self.path_specs(exit)? {
            total += spec.macs(&shape)?;
            shape = spec.output_shape(&shape)?;
        }
        Ok(total)
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Parameters in a fixed order with stable names such as `trunk.0.weight`.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            for (n, p) in l.params() {
                out.push((format!("trunk.{i}.{n}"), p));
            }
        }
        for (b, br) in self.branches.iter().enumerate() {
            for (i, l) in br.layers.iter().enumerate() {
                for (n, p) in l.params() {
                    out.push((format!("branch{b}.{i}.{n}"), p));
                }
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter_mut().enumerate() {
            for (n, p) in l.params_mut() {
                out.push((format!("trunk.{i}.{n}"), p));
            }
        }
        for (b, br) in self.branches.iter_mut().enumerate() {
            for (i, l) in br.layers.iter_mut().enumerate() {
                for (n, p) in l.params_mut() {
                    out.push((format!("branch{b}.{i}.{n}"), p));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    pub fn clear_caches(&mut self) {
        self.trunk.iter_mut().for_each(Layer::clear_cache);
        for b in &mut self.branches {
            b.layers.iter_mut().for_each(Layer::clear_cache);
        }
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Flat view of parameter `i` across all tensors in `named_params` order.
    pub fn flat_param(&self, mut i: usize) -> Option<(T, T)> {
        for (_, p) in self.named_params() {
            if i < p.value.len() {
                return Some((p.value.data()[i], p.grad.data()[i]));
            }
            i -= p.value.len();
        }
        None
    }

    pub fn set_flat_param(&mut self, mut i: usize, v: T) {
        for p in self.params_mut() {
            if i < p.value.len() {
                p.value.data_mut()[i] = v;
                return;
            }
            i -= p.value.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            meta: self.meta.clone(),
            input_shape: self.input_shape.clone(),
            trunk: self.trunk.iter().map(Layer::cast).collect(),
            branches: self
                .branches
                .iter()
                .map(|b| Branch { tap: b.tap, layers: b.layers.iter().map(Layer::cast).collect() })
                .collect(),
        }
    }

    /// Reshapes `x` to `[N, input_shape...]`; returns whether it was unbatched.
    pub fn batch_input(&self, x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
        let per: usize = self.input_shape.iter().product();
        if !x.len().is_multiple_of(per) {
            return Err(Error::Shape(format!("input {:?} is not a batch of {:?}", x.shape(), self.input_shape)));
        }
        let unbatched = x.len() == per && x.rank() != self.input_shape.len() + 1;
        let n = x.len() / per;
        let mut shape = vec![n];
        shape.extend_from_slice(&self.input_shape);
        Ok((x.clone().reshape(shape)?, unbatched))
    }

    fn unbatch(t: Tensor<T>, unbatched: bool) -> Result<Tensor<T>> {
        if unbatched {
            let shape = t.shape()[1..].to_vec();
            t.reshape(shape)
        } else {
            Ok(t)
        }
    }

    /// Runs trunk layers `from..to` on an already batched activation.
    pub fn forward_trunk_range(&self, x: &Tensor<T>, from: usize, to: usize) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &self.trunk[from..to] {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    /// Runs the head of branch `b` (0-based) on a batched trunk activation.
    pub fn forward_branch(&self, b: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &self.branches[b].layers {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    /// Evaluates every exit, sharing the trunk computation.
    pub fn forward_exits(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (x, unbatched) = self.batch_input(x)?;
        let mut outs = Vec::with_capacity(self.exit_count());
        let mut h = x;
        let mut pos = 0;
        for (b, br) in self.branches.iter().enumerate() {
            h = self.forward_trunk_range(&h, pos, br.tap)?;
            pos = br.tap;
            outs.push(self.forward_branch(b, &h)?);
        }
        outs.push(self.forward_trunk_range(&h, pos, self.trunk.len())?);
        outs.into_iter()
            .map(|o| {
                o.ensure_finite("network output")?;
                Self::unbatch(o, unbatched)
            })
            .collect()
    }

    /// Evaluates only the layers on the path to `exit`.
    pub fn forward_exit(&self, x: &Tensor<T>, exit: usize) -> Result<Tensor<T>> {
        self.check_exit(exit)?;
        let (x, unbatched) = self.batch_input(x)?;
        let out = if exit == self.final_exit() {
            self.forward_trunk_range(&x, 0, self.trunk.len())?
        } else {
            let b = &self.branches[exit - 1];
            let h = self.forward_trunk_range(&x, 0, b.tap)?;
            self.forward_branch(exit - 1, &h)?
        };
        out.ensure_finite("network output")?;
        Self::unbatch(out, unbatched)
    }

    /// Piecewise-linear state of a forward pass over every exit path.
    pub fn activation_pattern(&self, x: &Tensor<T>) -> Result<ActivationPattern> {
        let (x, _) = self.batch_input(x)?;
        let mut pattern =
            ActivationPattern { relu_signs: Vec::new(), pool_winners: Vec::new(), min_relu_margin: f64::INFINITY };
        let mut h = x;
        let mut pos = 0;
        let mut record = |layers: &[Layer<T>], mut h: Tensor<T>| -> Result<Tensor<T>> {
            for l in layers {
                match *l.spec() {
                    LayerSpec::Relu => {
                        for &v in h.data() {
                            pattern.relu_signs.push(v > T::zero());
                            pattern.min_relu_margin = pattern.min_relu_margin.min(v.as_f64().abs());
                        }
                    }
                    LayerSpec::Maxpool2d { window, stride, padding } => {
                        pattern.pool_winners.extend(maxpool2d_padded(&h, window, stride, padding)?.1);
                    }
                    _ => {}
                }
                h = l.forward(&h)?;
            }
            Ok(h)
        };
        for br in &self.branches {
            h = record(&self.trunk[pos..br.tap], h)?;
            pos = br.tap;
            record(&br.layers, h.clone())?;
        }
        record(&self.trunk[pos..], h)?;
        Ok(pattern)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_exit(x, self.final_exit())
    }

    /// Training forward pass over a batch; caches activations for `backward`.
    pub fn forward_train(&mut self, x: &Tensor<T>, taps: &[usize]) -> Result<ForwardTrace<T>> {
        let (x, _) = self.batch_input(x)?;
        let mut exits = Vec::with_capacity(self.exit_count());
        let mut tap_out = vec![None; taps.len()];
        let mut h = x;
        let mut next_branch = 0;
        for pos in 0..=self.trunk.len() {
            for (i, t) in taps.iter().enumerate() {
                if *t == pos {
                    tap_out[i] = Some(h.clone());
                }
            }
            while next_branch < self.branches.len() && self.branches[next_branch].tap == pos {
                let mut bh = h.clone();
                for l in &mut self.branches[next_branch].layers {
                    bh = l.forward_train(&bh)?;
                }
                bh.ensure_finite("branch output")?;
                exits.push(bh);
                next_branch += 1;
            }
            if pos < self.trunk.len() {
                h = self.trunk[pos].forward_train(&h)?;
            }
        }
        h.ensure_finite("network output")?;
        exits.push(h);
        let taps = tap_out
            .into_iter()
            .map(|t| t.ok_or_else(|| Error::Shape("tap position beyond trunk".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardTrace { exits, taps })
    }

    /// Backpropagates per-exit output gradients (`None` skips an exit) plus
    /// extra gradients injected at trunk positions, accumulating into every
    /// parameter's `grad`. With `at_logits`, exit gradients are taken w.r.t.
    /// the input of a trailing softmax, whose own backward is skipped.
    pub fn backward(
        &mut self,
        exit_grads: &[Option<Tensor<T>>],
        at_logits: bool,
        tap_grads: &[(usize, Tensor<T>)],
    ) -> Result<()> {
        if exit_grads.len() != self.exit_count() {
            return Err(Error::Shape(format!("{} exit gradients for {} exits", exit_grads.len(), self.exit_count())));
        }
        let n_trunk = self.trunk.len();
        let mut grad_at: Vec<Option<Tensor<T>>> = vec![None; n_trunk + 1];

        let skip_tail = at_logits && self.trunk[n_trunk - 1].spec() == &LayerSpec::Softmax;
        if let Some(g) = &exit_grads[n_trunk_exit(self)] {
            let pos = if skip_tail { n_trunk - 1 } else { n_trunk };
            grad_at[pos] = Some(g.clone());
        }
        for (pos, g) in tap_grads {
            add_into(&mut grad_at[*pos], g)?;
        }

        // Branch heads first: they deposit gradients at their tap positions.
        for (b, br) in self.branches.iter_mut().enumerate() {
            let Some(g) = &exit_grads[b] else {
                br.layers.iter_mut().for_each(Layer::clear_cache);
                continue;
            };
            let mut g = g.clone();
            let mut layers: &mut [Layer<T>] = &mut br.layers;
            if at_logits && layers.last().map(|l| l.spec() == &LayerSpec::Softmax).unwrap_or(false) {
                let n = layers.len();
                layers[n - 1].clear_cache();
                layers = &mut layers[..n - 1];
            }
            for l in layers.iter_mut().rev() {
                g = l.backward(&g, true)?.expect("input gradient requested");
            }
            add_into(&mut grad_at[br.tap], &g)?;
        }

        for pos in (1..=n_trunk).rev() {
            let layer = &mut self.trunk[pos - 1];
            if pos == n_trunk && skip_tail {
                layer.clear_cache();
                continue;
            }
            let Some(g) = grad_at[pos].take() else {
                layer.clear_cache();
                continue;
            };
            g.ensure_finite("backward gradient")?;
            if let Some(gi) = layer.backward(&g, pos > 1)? {
                add_into(&mut grad_at[pos - 1], &gi)?;
            }
        }
        for p in self.params_mut() {
            p.grad.ensure_finite("parameter gradient")?;
        }
        Ok(())
    }
}

fn n_trunk_exit<T: Scalar>(net: &Network<T>) -> usize {
    net.branches.len()
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: &Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g.clone()),
        Some(acc) => {
            if acc.len() != g.len() {
                return Err(Error::Shape(format!("gradient {:?} vs {:?}", acc.shape(), g.shape())));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
    Ok(())
}
