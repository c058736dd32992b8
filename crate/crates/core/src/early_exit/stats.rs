use serde::{Deserialize, Serialize};

use super::{entropy, infer_with_exit, ExitPolicy};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::models::Network;
use crate::parallel::map_shards;
use crate::tensor::argmax;

const EVAL_CHUNK: usize = 500;

/// Fraction of `set` classified correctly at `exit` (every sample evaluated
/// there, no gating).
pub fn classifier_accuracy(net: &Network, set: &ImageSet, exit: usize, threads: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyInput("accuracy over an empty set".into()));
    }
    let counts = map_shards(set.len(), threads, |range| {
        let mut correct = 0usize;
        let idx: Vec<usize> = range.collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let out = net.forward_exit(&set.batch(chunk), exit)?;
            let k = out.len() / chunk.len();
            for (row, &i) in out.data().chunks_exact(k).zip(chunk) {
                correct += (argmax(row) == set.labels[i] as usize) as usize;
            }
        }
        Ok(correct)
    })?;
    Ok(counts.iter().sum::<usize>() as f64 / set.len() as f64)
}

/// Entropy and prediction of every exit for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleExits {
    pub label: u8,
    pub entropies: Vec<f64>,
    pub preds: Vec<u8>,
}

/// Per-sample exit data, from which statistics at any threshold follow
/// without re-running the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitProfile {
    pub samples: Vec<SampleExits>,
}

/// Evaluates every exit of every sample one image at a time, so entropies
/// are bit-identical to those seen by [`infer_with_exit`].
pub fn exit_profile(net: &Network, set: &ImageSet, threads: usize) -> Result<ExitProfile> {
    if set.is_empty() {
        return Err(Error::EmptyInput("exit profile of an empty set".into()));
    }
    let parts = map_shards(set.len(), threads, |range| {
        range
            .map(|i| {
                let outs = net.forward_exits(&set.image_tensor(i))?;
                let entropies = outs.iter().map(|o| entropy(o.data())).collect::<Result<Vec<_>>>()?;
                let preds = outs.iter().map(|o| argmax(o.data()) as u8).collect();
                Ok(SampleExits { label: set.labels[i], entropies, preds })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(ExitProfile { samples: parts.concat() })
}

/// Per-exit share of samples and accuracy under a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitStatistics {
    pub total: usize,
    pub counts: Vec<usize>,
    pub correct: Vec<usize>,
    pub fractions: Vec<f64>,
    /// `None` for an exit no sample took.
    pub exit_accuracy: Vec<Option<f64>>,
    pub accuracy: f64,
}

impl ExitStatistics {
    fn from_counts(counts: Vec<usize>, correct: Vec<usize>) -> Self {
        let total: usize = counts.iter().sum();
        let fractions = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let exit_accuracy = counts.iter().zip(&correct).map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64)).collect();
        let accuracy = correct.iter().sum::<usize>() as f64 / total as f64;
        ExitStatistics { total, counts, correct, fractions, exit_accuracy, accuracy }
    }

    pub fn early_fraction(&self) -> f64 {
        1.0 - self.fractions.last().copied().unwrap_or(0.0)
    }
}

impl ExitProfile {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn taken_exit(&self, s: &SampleExits, policy: &ExitPolicy) -> usize {
        let last = s.entropies.len();
        (1..last).find(|&e| policy.takes_exit(e, s.entropies[e - 1])).unwrap_or(last)
    }

    pub fn statistics(&self, policy: &ExitPolicy) -> Result<ExitStatistics> {
        let Some(first) = self.samples.first() else {
            return Err(Error::EmptyInput("no samples".into()));
        };
        let exits = first.entropies.len();
        let (mut counts, mut correct) = (vec![0; exits], vec![0; exits]);
        for s in &self.samples {
            let e = self.taken_exit(s, policy);
            counts[e - 1] += 1;
            correct[e - 1] += (s.preds[e - 1] == s.label) as usize;
        }
        Ok(ExitStatistics::from_counts(counts, correct))
    }

    /// Correct predictions when every sample runs to the final exit.
    pub fn final_correct(&self) -> usize {
        self.samples.iter().filter(|s| s.preds.last() == Some(&s.label)).count()
    }
}

/// Gated inference over `set`, one image at a time.
pub fn exit_statistics(net: &Network, set: &ImageSet, policy: &ExitPolicy, threads: usize) -> Result<ExitStatistics> {
    if set.is_empty() {
        return Err(Error::EmptyInput("exit statistics of an empty set".into()));
    }
    let exits = net.exit_count();
    let parts = map_shards(set.len(), threads, |range| {
        let (mut counts, mut correct) = (vec![0usize; exits], vec![0usize; exits]);
        for i in range {
            let o = infer_with_exit(net, &set.image_tensor(i), policy)?;
            counts[o.exit - 1] += 1;
            correct[o.exit - 1] += (o.class == set.labels[i] as usize) as usize;
        }
        Ok((counts, correct))
    })?;
    let (mut counts, mut correct) = (vec![0; exits], vec![0; exits]);
    for (c, k) in parts {
        for e in 0..exits {
            counts[e] += c[e];
            correct[e] += k[e];
        }
    }
    Ok(ExitStatistics::from_counts(counts, correct))
}

/// `0` followed by `points − 1` log-spaced values from `1e-4·ln 10` to `ln 10`.
pub fn threshold_grid(points: usize) -> Vec<f64> {
    let top = (10f64).ln();
    let mut grid = vec![0.0];
    if points >= 2 {
        let steps = (points - 2).max(1) as f64;
        grid.extend((0..points - 1).map(|i| top * 10f64.powf(-4.0 * (1.0 - i as f64 / steps))));
    }
    grid.truncate(points.max(1));
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub policy: ExitPolicy,
    pub accuracy: f64,
    pub full_accuracy: f64,
    pub early_fraction: f64,
}

/// Largest grid threshold whose gated accuracy is within `budget_pp`
/// percentage points of the final-exit accuracy.
pub fn tune_threshold(profile: &ExitProfile, budget_pp: f64, points: usize) -> Result<TuneResult> {
    if profile.is_empty() {
        return Err(Error::EmptyInput("threshold search over an empty set".into()));
    }
    if budget_pp.is_nan() || budget_pp < 0.0 {
        return Err(Error::Range(format!("accuracy budget {budget_pp} must be >= 0")));
    }
    let n = profile.len() as f64;
    let full = profile.final_correct();
    let mut best = None;
    for t in threshold_grid(points) {
        let policy = ExitPolicy { thresholds: vec![t], dataset: None };
        let stats = profile.statistics(&policy)?;
        let correct: usize = stats.correct.iter().sum();
        let drop_pp = (full as f64 - correct as f64) / n * 100.0;
        if drop_pp <= budget_pp {
            best = Some(TuneResult {
                policy,
                accuracy: stats.accuracy,
                full_accuracy: full as f64 / n,
                early_fraction: stats.early_fraction(),
            });
        }
    }
    best.ok_or_else(|| Error::State("no feasible threshold".into()))
}
