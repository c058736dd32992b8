use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::classifier_accuracy;
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::models::Network;
use crate::nn::{cross_entropy_batch, Differentiable, Optimizer, OptimizerConfig};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Loss weight per exit, exit 1 first.
    pub exit_weights: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Images held out (after a seeded shuffle) for early stopping; 0 disables.
    pub validation: usize,
    /// Stop after this many epochs without a validation-accuracy gain.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            exit_weights: vec![1.0, 1.0],
            epochs: 50,
            batch_size: 128,
            optimizer: OptimizerConfig::classifier_default(),
            seed: 0,
            validation: 5000,
            patience: Some(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean weighted training loss.
    pub loss: f64,
    /// Mean unweighted cross-entropy per exit.
    pub exit_losses: Vec<f64>,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Seeded split into (train, validation) indices; validation is the tail.
pub fn split_indices(n: usize, validation: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if validation == 0 || validation >= n {
        return (idx, Vec::new());
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = idx.split_off(n - validation);
    (idx, val)
}

/// Generator for `epoch` under `seed`: one ChaCha stream per epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn numerical(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::Numerical { epoch, batch, what },
        other => other,
    }
}

/// Minimizes `Σ_n w_n·CE(exit n)` with mini-batches; see [`train_joint_with`].
pub fn train_joint(net: &mut Network, set: &ImageSet, cfg: &TrainConfig) -> Result<TrainReport> {
    train_joint_with(net, set, cfg, |_| {})
}

/// Joint multi-exit training. Every epoch reshuffles the training indices;
/// shared layers accumulate gradients from all exits with non-zero weight.
/// With a validation hold-out, the weights of the best validation epoch are
/// kept.
pub fn train_joint_with(
    net: &mut Network,
    set: &ImageSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    let exits = net.exit_count();
    if cfg.exit_weights.len() != exits {
        return Err(Error::Config(format!("{} exit weights for {exits} exits", cfg.exit_weights.len())));
    }
    if cfg.exit_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Config("exit weights must be finite and >= 0".into()));
    }
    if cfg.exit_weights.iter().all(|w| *w == 0.0) {
        return Err(Error::Config("all exit weights are zero".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch size must be >= 1".into()));
    }
    if set.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let (train_idx, val_idx) = split_indices(set.len(), cfg.validation, cfg.seed);
    let val_set = (!val_idx.is_empty()).then(|| set.select(&val_idx));

    let mut opt = Optimizer::new(cfg.optimizer);
    let mut report = TrainReport { epochs: Vec::new(), best_epoch: 0, stopped_early: false };
    let mut best: Option<(f64, Network)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let start = std::time::Instant::now();
        let mut order = train_idx.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let (mut loss_sum, mut exit_sums) = (0.0, vec![0.0; exits]);
        let mut seen = 0usize;

        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let to_num = numerical(epoch, b + 1);
            let x = set.batch(chunk);
            let labels = set.batch_labels(chunk);
            net.zero_grad();
            let trace = net.forward_train(&x, &[]).map_err(&to_num)?;
            let mut grads = Vec::with_capacity(exits);
            let mut batch_loss = 0.0;
            for (e, out) in trace.exits.iter().enumerate() {
                let w = cfg.exit_weights[e];
                let (l, g) = cross_entropy_batch(out, &labels, w)?;
                exit_sums[e] += l * chunk.len() as f64;
                batch_loss += w * l;
                grads.push((w > 0.0).then_some(g));
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical { epoch, batch: b + 1, what: format!("training loss {batch_loss}") });
            }
            loss_sum += batch_loss * chunk.len() as f64;
            seen += chunk.len();
            net.backward(&grads, true, &[]).map_err(&to_num)?;
            opt.step(&mut net.params_mut())?;
        }

        let val_accuracy = match &val_set {
            Some(v) => Some(classifier_accuracy(net, v, net.final_exit(), 1)?),
            None => None,
        };
        let log = EpochLog {
            epoch,
            loss: loss_sum / seen as f64,
            exit_losses: exit_sums.iter().map(|s| s / seen as f64).collect(),
            val_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        report.epochs.push(log);

        match val_accuracy {
            Some(acc) => {
                if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                    best = Some((acc, net.clone()));
                    report.best_epoch = epoch;
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    report.stopped_early = true;
                    break;
                }
            }
            None => report.best_epoch = epoch,
        }
    }
    if let Some((_, kept)) = best {
        *net = kept;
    }
    net.meta.epochs = report.best_epoch;
    Ok(report)
}

/// Weighted multi-exit cross-entropy on a fixed batch, for gradient checks.
#[derive(Debug, Clone)]
pub struct JointObjective {
    pub net: Network<f64>,
    pub input: Tensor<f64>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
}

impl JointObjective {
    /// True when moving parameter `i` by `±eps` changes a ReLU sign or a
    /// max-pool winner, or leaves a ReLU input within `1e-6` of zero.
    pub fn near_kink(&mut self, i: usize, eps: f64) -> bool {
        let p = self.get(i);
        self.set(i, p + eps);
        let up = self.net.activation_pattern(&self.input);
        self.set(i, p - eps);
        let down = self.net.activation_pattern(&self.input);
        self.set(i, p);
        match (up, down) {
            (Ok(u), Ok(d)) => !u.same_piece(&d) || u.min_relu_margin < 1e-6 || d.min_relu_margin < 1e-6,
            _ => true,
        }
    }
}

impl Differentiable for JointObjective {
    fn num_params(&self) -> usize {
        self.net.param_count()
    }

    fn get(&self, i: usize) -> f64 {
        self.net.flat_param(i).expect("parameter index").0
    }

    fn set(&mut self, i: usize, v: f64) {
        self.net.set_flat_param(i, v);
    }

    fn loss(&mut self) -> Result<f64> {
        let outs = self.net.forward_exits(&self.input)?;
        let mut total = 0.0;
        for (out, w) in outs.iter().zip(&self.weights) {
            total += w * cross_entropy_batch(out, &self.labels, 1.0)?.0;
        }
        Ok(total)
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        self.net.zero_grad();
        let trace = self.net.forward_train(&self.input, &[])?;
        let grads = trace
            .exits
            .iter()
            .zip(&self.weights)
            .map(|(out, &w)| cross_entropy_batch(out, &self.labels, w).map(|(_, g)| Some(g)))
            .collect::<Result<Vec<_>>>()?;
        self.net.backward(&grads, true, &[])?;
        Ok(self.net.named_params().iter().flat_map(|(_, p)| p.grad.data().iter().map(|g| g.as_f64())).collect())
    }
}
