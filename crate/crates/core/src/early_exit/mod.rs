//! Entropy-gated inference over multi-exit networks, joint training of all
//! exits, exit statistics and threshold search.

pub mod stats;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::data::DatasetId;
use crate::error::{Error, Result};
use crate::models::Network;
use crate::tensor::{argmax, Scalar, Tensor};

pub use stats::{
    classifier_accuracy, exit_profile, exit_statistics, threshold_grid, tune_threshold, ExitProfile, ExitStatistics,
    SampleExits, TuneResult,
};
pub use train::{train_joint, JointObjective, TrainConfig, TrainReport};

/// Slack above `ln K` accepted for thresholds, so that `ln K + ε` can force
/// every sample out at the first exit.
const THRESHOLD_SLACK: f64 = 1e-6;

/// `−Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn entropy<T: Scalar>(probs: &[T]) -> Result<f64> {
    let mut h = 0.0;
    for &p in probs {
        let p = p.as_f64();
        if p < -1e-9 || !p.is_finite() {
            return Err(Error::Domain(format!("probability {p} is not in [0,1]")));
        }
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h.max(0.0))
}

/// Entropy thresholds for the early exits (exit 1 first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub dataset: Option<DatasetId>,
}

impl ExitPolicy {
    /// Single early exit with threshold `t` over 10 classes.
    pub fn new(t: f64) -> Result<Self> {
        let max = (10f64).ln() + THRESHOLD_SLACK;
        if !(0.0..=max).contains(&t) {
            return Err(Error::Range(format!("entropy threshold {t} outside [0, ln 10]")));
        }
        Ok(ExitPolicy { thresholds: vec![t], dataset: None })
    }

    pub fn for_dataset(dataset: DatasetId) -> Self {
        ExitPolicy { thresholds: vec![dataset.default_threshold()], dataset: Some(dataset) }
    }

    /// Threshold above every attainable entropy over 10 classes.
    pub fn always_early() -> Self {
        ExitPolicy { thresholds: vec![(10f64).ln() + THRESHOLD_SLACK], dataset: None }
    }

    pub fn threshold(&self, exit: usize) -> f64 {
        self.thresholds.get(exit - 1).copied().unwrap_or(0.0)
    }

    /// Exit-1 rule: `H < T`.
    pub fn takes_exit(&self, exit: usize, entropy: f64) -> bool {
        entropy < self.threshold(exit)
    }
}

/// Result of gated inference on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitOutcome {
    pub class: usize,
    /// 1-based exit id that produced the prediction.
    pub exit: usize,
    /// Entropy at each evaluated exit, in evaluation order.
    pub entropies: Vec<f64>,
    pub probs: Vec<f32>,
}

/// Runs the trunk once, stopping at the first exit whose entropy falls below
/// its threshold. Deeper layers are only computed for samples that continue.
pub fn infer_with_exit<T: Scalar>(net: &Network<T>, image: &Tensor<T>, policy: &ExitPolicy) -> Result<ExitOutcome> {
    if net.branches().is_empty() {
        return Err(Error::Architecture("gated inference needs at least one early exit".into()));
    }
    let (x, _) = net.batch_input(image)?;
    if x.shape()[0] != 1 {
        return Err(Error::Shape(format!("expected a single image, got batch {:?}", x.shape())));
    }
    let mut entropies = Vec::with_capacity(net.exit_count());
    let mut h = x;
    let mut pos = 0;
    for (b, br) in net.branches().iter().enumerate() {
        h = net.forward_trunk_range(&h, pos, br.tap)?;
        pos = br.tap;
        let out = net.forward_branch(b, &h)?;
        out.ensure_finite("exit output")?;
        let e = entropy(out.data())?;
        entropies.push(e);
        if policy.takes_exit(b + 1, e) {
            return Ok(outcome(&out, b + 1, entropies));
        }
    }
    let out = net.forward_trunk_range(&h, pos, net.trunk().len())?;
    out.ensure_finite("exit output")?;
    entropies.push(entropy(out.data())?);
    Ok(outcome(&out, net.final_exit(), entropies))
}

fn outcome<T: Scalar>(out: &Tensor<T>, exit: usize, entropies: Vec<f64>) -> ExitOutcome {
    ExitOutcome {
        class: argmax(out.data()),
        exit,
        entropies,
        probs: out.data().iter().map(|p| p.as_f64() as f32).collect(),
    }
}
