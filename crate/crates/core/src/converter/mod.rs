//! Hardness labeling with a trained early-exit network, hard→easy training
//! pairs, converting-autoencoder training and the two-stage CBNet pipeline.

pub mod pipeline;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassIndex, Hardness, HardnessLabels, ImageSet};
use crate::early_exit::train::epoch_rng;
use crate::early_exit::{infer_with_exit, ExitPolicy};
use crate::error::{Error, Result};
use crate::models::{checkpoint_id, Network};
use crate::parallel::map_shards;

pub use pipeline::{cbnet_infer, convert, evaluate_pipeline, CbnetOutcome, CbnetPipeline, PipelineEvaluation};
pub use train::{
    fine_tune_lightweight, train_autoencoder, AutoencoderConfig, AutoencoderReport, ReconstructionObjective,
};

/// Flags each image easy iff gated inference takes exit 1.
pub fn label_hardness(
    branchy: &Network,
    set: &ImageSet,
    policy: &ExitPolicy,
    threads: usize,
) -> Result<HardnessLabels> {
    if set.is_empty() {
        return Err(Error::EmptyInput("hardness labeling of an empty set".into()));
    }
    let parts = map_shards(set.len(), threads, |range| {
        range
            .map(|i| {
                let o = infer_with_exit(branchy, &set.image_tensor(i), policy)?;
                Ok(if o.exit == 1 { Hardness::Easy } else { Hardness::Hard })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(HardnessLabels { flags: parts.concat(), threshold: policy.threshold(1), checkpoint_id: checkpoint_id(branchy)? })
}

/// An input image index paired with an easy same-class target index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub input: usize,
    pub target: usize,
    pub epoch: usize,
}

/// One pair per image; targets are drawn uniformly from the image's class
/// pool with a generator determined by `(seed, epoch)`.
pub fn build_training_pairs(
    set: &ImageSet,
    labels: &HardnessLabels,
    index: &ClassIndex,
    seed: u64,
    epoch: usize,
) -> Result<Vec<TrainingPair>> {
    if labels.len() != set.len() {
        return Err(Error::Shape(format!("{} hardness flags for {} images", labels.len(), set.len())));
    }
    let mut rng = epoch_rng(seed, epoch);
    set.labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let pool = index.per_class.get(c as usize).filter(|p| !p.is_empty());
            let pool = pool.ok_or(Error::ClassWithoutEasyExemplar(c as usize))?;
            Ok(TrainingPair { input: i, target: pool[rng.random_range(0..pool.len())], epoch })
        })
        .collect()
}
