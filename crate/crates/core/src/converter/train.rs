use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{build_training_pairs, convert, TrainingPair};
use crate::data::{build_class_index, HardnessLabels, ImageSet, IMAGE_PIXELS};
use crate::early_exit::train::{epoch_rng, split_indices, train_joint_with, EpochLog, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::models::{Network, ENCODER_TAP};
use crate::nn::{l1_activity_penalty, mse_loss, Differentiable, LayerSpec, LossValue, Optimizer, OptimizerConfig};
use crate::tensor::{Scalar, Tensor};

/// Salt separating the batch-order stream from the target-sampling stream.
const ORDER_SALT: u64 = 0xA5A5_5A5A_0F0F_F0F0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// L1 activity coefficient on the bottleneck output.
    pub l1: f64,
    pub seed: u64,
    /// Held-out images for early stopping on reconstruction loss; 0 disables.
    pub validation: usize,
    pub patience: Option<usize>,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            epochs: 50,
            batch_size: 256,
            optimizer: OptimizerConfig::adam_default(),
            l1: 1e-8,
            seed: 0,
            validation: 5000,
            patience: Some(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderEpoch {
    pub epoch: usize,
    /// Mean per-batch loss with its MSE and L1 parts.
    pub loss: LossValue,
    pub val_mse: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderReport {
    pub epochs: Vec<AutoencoderEpoch>,
    /// Every optimizer step's loss, in order.
    pub steps: Vec<LossValue>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl AutoencoderReport {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss.total).collect()
    }
}

fn flat_targets(set: &ImageSet, idx: &[usize]) -> Result<Tensor> {
    set.batch(idx).reshape(vec![idx.len(), IMAGE_PIXELS])
}

/// MSE to the targets plus `l1 · Σ|bottleneck| / batch`, with its gradients.
fn batch_loss<T: Scalar>(
    ae: &mut Network<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
    l1: f64,
) -> Result<(LossValue, Tensor<T>, Tensor<T>)> {
    let trace = ae.forward_train(input, &[ENCODER_TAP])?;
    let out = &trace.exits[0];
    let target = target.clone().reshape(out.shape().to_vec())?;
    let (mse, g_out) = mse_loss(out, &target)?;
    let b = out.batch_len() as f64;
    let (reg, g_code) = l1_activity_penalty(&trace.taps[0], l1 / b)?;
    Ok((mse + reg, g_out, g_code))
}

fn mean_mse(ae: &Network, set: &ImageSet, pairs: &[TrainingPair], batch: usize) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in pairs.chunks(batch) {
        let inputs: Vec<usize> = chunk.iter().map(|p| p.input).collect();
        let targets: Vec<usize> = chunk.iter().map(|p| p.target).collect();
        let out = ae.forward(&set.batch(&inputs))?;
        let t = flat_targets(set, &targets)?.reshape(out.shape().to_vec())?;
        sum += mse_loss(&out, &t)?.0.data * chunk.len() as f64;
    }
    Ok(sum / pairs.len() as f64)
}

/// Trains `ae` with Adam to map every image of `set` to a freshly sampled
/// easy image of its class each epoch. With a hold-out, the weights with the
/// lowest held-out MSE (fixed targets) are kept.
pub fn train_autoencoder_with(
    ae: &mut Network,
    set: &ImageSet,
    labels: &HardnessLabels,
    cfg: &AutoencoderConfig,
    mut on_epoch: impl FnMut(&AutoencoderEpoch),
) -> Result<AutoencoderReport> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be >= 1".into()));
    }
    if ae.input_shape().iter().product::<usize>() != IMAGE_PIXELS || ae.trunk().len() <= ENCODER_TAP {
        return Err(Error::Architecture("not a converting autoencoder".into()));
    }
    let index = build_class_index(set, labels)?;
    let (train_idx, val_idx) = split_indices(set.len(), cfg.validation, cfg.seed);
    let val_pairs: Vec<TrainingPair> = {
        let all = build_training_pairs(set, labels, &index, cfg.seed, 0)?;
        val_idx.iter().map(|&i| all[i]).collect()
    };

    let mut opt = Optimizer::new(cfg.optimizer);
    let mut report = AutoencoderReport { epochs: Vec::new(), steps: Vec::new(), best_epoch: 0, stopped_early: false };
    let mut best: Option<(f64, Network)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let start = std::time::Instant::now();
        let pairs = build_training_pairs(set, labels, &index, cfg.seed, epoch)?;
        let mut order = train_idx.clone();
        order.shuffle(&mut epoch_rng(cfg.seed ^ ORDER_SALT, epoch));
        let mut sum = LossValue::default();
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let targets: Vec<usize> = chunk.iter().map(|&i| pairs[i].target).collect();
            let x = set.batch(chunk);
            let t = flat_targets(set, &targets)?;
            ae.zero_grad();
            let wrap = |e: Error| match e {
                Error::NonFinite(what) => Error::Numerical { epoch, batch: b + 1, what },
                other => other,
            };
            let (loss, g_out, g_code) = batch_loss(ae, &x, &t, cfg.l1).map_err(wrap)?;
            if !loss.total.is_finite() {
                return Err(Error::Numerical {
                    epoch,
                    batch: b + 1,
                    what: format!("reconstruction loss {}", loss.total),
                });
            }
            ae.backward(&[Some(g_out)], false, &[(ENCODER_TAP, g_code)]).map_err(wrap)?;
            opt.step(&mut ae.params_mut())?;
            report.steps.push(loss);
            sum = sum + loss;
            batches += 1;
        }
        let mean = LossValue {
            total: sum.total / batches as f64,
            data: sum.data / batches as f64,
            regularization: sum.regularization / batches as f64,
        };
        let val_mse = if val_pairs.is_empty() { None } else { Some(mean_mse(ae, set, &val_pairs, 1000)?) };
        let log = AutoencoderEpoch { epoch, loss: mean, val_mse, seconds: start.elapsed().as_secs_f64() };
        on_epoch(&log);
        report.epochs.push(log);

        match val_mse {
            Some(v) => {
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, ae.clone()));
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
        *ae = kept;
    }
    ae.meta.epochs = report.best_epoch;
    Ok(report)
}

pub fn train_autoencoder(
    ae: &mut Network,
    set: &ImageSet,
    labels: &HardnessLabels,
    cfg: &AutoencoderConfig,
) -> Result<AutoencoderReport> {
    train_autoencoder_with(ae, set, labels, cfg, |_| {})
}

/// Trains the lightweight classifier further on autoencoder outputs.
pub fn fine_tune_lightweight(
    light: &mut Network,
    ae: &Network,
    set: &ImageSet,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    let mut converted = set.clone();
    let mut data = Vec::with_capacity(set.images.len());
    let all: Vec<usize> = (0..set.len()).collect();
    for chunk in all.chunks(1000) {
        data.extend_from_slice(convert(ae, &set.batch(chunk))?.data());
    }
    converted.images = Tensor::new(set.images.shape().to_vec(), data)?;
    let cfg = TrainConfig { exit_weights: vec![1.0], ..cfg.clone() };
    let report = train_joint_with(light, &converted, &cfg, on_epoch)?;
    light.meta.fine_tuned = true;
    Ok(report)
}

/// Reconstruction objective (MSE + L1 activity) on a fixed batch, for
/// gradient checks in double precision.
#[derive(Debug, Clone)]
pub struct ReconstructionObjective {
    pub net: Network<f64>,
    pub input: Tensor<f64>,
    pub target: Tensor<f64>,
    pub l1: f64,
}

impl ReconstructionObjective {
    /// Trunk positions whose activation sign decides a kink: every ReLU
    /// input and the L1-penalized bottleneck.
    fn kink_taps(&self) -> Vec<usize> {
        let mut taps: Vec<usize> =
            self.net.trunk().iter().enumerate().filter(|(_, l)| l.spec() == &LayerSpec::Relu).map(|(i, _)| i).collect();
        taps.push(ENCODER_TAP);
        taps
    }

    fn signs_at(&mut self) -> Result<Vec<(i8, f64)>> {
        let taps = self.kink_taps();
        let trace = self.net.forward_train(&self.input, &taps)?;
        self.net.clear_caches();
        let out = trace
            .taps
            .iter()
            .flat_map(|t| t.data().iter().map(|&a| (a.signum() as i8 * (a != 0.0) as i8, a.abs())))
            .collect();
        Ok(out)
    }

    /// True when moving parameter `i` by `±eps` flips the sign of a kinked
    /// activation or lands one within `1e-6` of zero.
    pub fn near_kink(&mut self, i: usize, eps: f64) -> bool {
        let p = self.get(i);
        self.set(i, p + eps);
        let up = self.signs_at();
        self.set(i, p - eps);
        let down = self.signs_at();
        self.set(i, p);
        match (up, down) {
            (Ok(u), Ok(d)) => u.iter().zip(&d).any(|(a, b)| a.0 != b.0 || a.1 < 1e-6 || b.1 < 1e-6),
            _ => true,
        }
    }
}

impl Differentiable for ReconstructionObjective {
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
        let (loss, _, _) = batch_loss(&mut self.net, &self.input, &self.target, self.l1)?;
        self.net.clear_caches();
        Ok(loss.total)
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        self.net.zero_grad();
        let (_, g_out, g_code) = batch_loss(&mut self.net, &self.input, &self.target, self.l1)?;
        self.net.backward(&[Some(g_out)], false, &[(ENCODER_TAP, g_code)])?;
        Ok(self.net.named_params().iter().flat_map(|(_, p)| p.grad.data().to_vec()).collect())
    }
}
