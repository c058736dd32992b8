use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageSet, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hardness {
    Easy,
    Hard,
}

/// Per-image easy/hard flags with the threshold and model that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessLabels {
    pub flags: Vec<Hardness>,
    pub threshold: f64,
    pub checkpoint_id: String,
}

impl HardnessLabels {
    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn is_easy(&self, i: usize) -> bool {
        self.flags[i] == Hardness::Easy
    }

    pub fn easy_count(&self) -> usize {
        self.flags.iter().filter(|f| **f == Hardness::Easy).count()
    }

    pub fn hard_count(&self) -> usize {
        self.len() - self.easy_count()
    }

    pub fn easy_fraction(&self) -> f64 {
        if self.flags.is_empty() {
            0.0
        } else {
            self.easy_count() as f64 / self.len() as f64
        }
    }

    pub fn select(&self, indices: &[usize]) -> HardnessLabels {
        HardnessLabels {
            flags: indices.iter().map(|&i| self.flags[i]).collect(),
            threshold: self.threshold,
            checkpoint_id: self.checkpoint_id.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn check_matches(&self, set: &ImageSet) -> Result<()> {
        if self.len() != set.len() {
            return Err(Error::Shape(format!("{} hardness flags for {} images", self.len(), set.len())));
        }
        Ok(())
    }
}

/// Indices of easy images, grouped by class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIndex {
    pub per_class: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn easy_of(&self, class: usize) -> &[usize] {
        &self.per_class[class]
    }

    pub fn total(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }
}

/// Groups the easy images of `set` by class. Fails on the lowest class that
/// has no easy image.
pub fn build_class_index(set: &ImageSet, labels: &HardnessLabels) -> Result<ClassIndex> {
    labels.check_matches(set)?;
    let mut per_class = vec![Vec::new(); NUM_CLASSES];
    for (i, (&label, flag)) in set.labels.iter().zip(&labels.flags).enumerate() {
        if *flag == Hardness::Easy {
            per_class[label as usize].push(i);
        }
    }
    if let Some(c) = per_class.iter().position(Vec::is_empty) {
        return Err(Error::ClassWithoutEasyExemplar(c));
    }
    Ok(ClassIndex { per_class })
}

/// A subset together with its hardness flags and source indices.
#[derive(Debug, Clone)]
pub struct Subset {
    pub set: ImageSet,
    pub hardness: HardnessLabels,
    pub indices: Vec<usize>,
}

fn round_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).round() as usize
}

/// Draws `round(ratio·N)` images keeping the hard proportion: `round(ratio·H)`
/// hard images and the rest easy, each group sampled without replacement
/// under `seed`. Selected images keep their original relative order.
pub fn stratified_subset(set: &ImageSet, labels: &HardnessLabels, ratio: f64, seed: u64) -> Result<Subset> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Range(format!("subset ratio {ratio} outside (0, 1]")));
    }
    labels.check_matches(set)?;
    let (mut hard, mut easy): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|&i| !labels.is_easy(i));
    let total = round_count(ratio, set.len()).max(1);
    let mut n_hard = round_count(ratio, hard.len()).min(total);
    if total - n_hard > easy.len() {
        n_hard = total - easy.len();
    }
    let n_easy = total - n_hard;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    hard.shuffle(&mut rng);
    easy.shuffle(&mut rng);
    let mut indices: Vec<usize> = hard[..n_hard].iter().chain(&easy[..n_easy]).copied().collect();
    indices.sort_unstable();

    Ok(Subset { set: set.select(&indices), hardness: labels.select(&indices), indices })
}
