//! MNIST-family datasets: IDX ingestion, normalization, hardness labels,
//! per-class easy-image indices and stratified subsets.

pub mod hardness;
pub mod idx;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use hardness::{build_class_index, stratified_subset, ClassIndex, Hardness, HardnessLabels, Subset};
pub use idx::{load_idx_images, load_idx_labels, write_idx_images, write_idx_labels, IdxImages};

/// Environment variable consulted when no data root is given explicitly.
pub const DATA_ROOT_ENV: &str = "CBNET_DATA_ROOT";

pub const NUM_CLASSES: usize = 10;
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Mnist,
    Fmnist,
    Kmnist,
}

impl DatasetId {
    pub const ALL: [DatasetId; 3] = [DatasetId::Mnist, DatasetId::Fmnist, DatasetId::Kmnist];

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Fmnist => "fmnist",
            DatasetId::Kmnist => "kmnist",
        }
    }

    /// Default early-exit entropy threshold (natural-log entropy).
    pub fn default_threshold(self) -> f64 {
        match self {
            DatasetId::Mnist => 0.05,
            DatasetId::Fmnist => 0.5,
            DatasetId::Kmnist => 0.025,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "fmnist" | "fashion-mnist" | "fashion_mnist" => Ok(DatasetId::Fmnist),
            "kmnist" => Ok(DatasetId::Kmnist),
            other => Err(Error::Profile(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file_prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Normalized images `[N,1,28,28]` in `[0,1]` with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub split: Split,
    pub dataset: DatasetId,
}

/// Converts raw IDX bytes to `[N,1,H,W]` values `pixel / 255`.
pub fn normalize(raw: &IdxImages, labels: Vec<u8>, split: Split, dataset: DatasetId) -> Result<ImageSet> {
    if raw.count != labels.len() {
        return Err(Error::Data(format!("{} images but {} labels", raw.count, labels.len())));
    }
    if raw.count == 0 {
        return Err(Error::EmptyInput("image file holds no images".into()));
    }
    let data = raw.pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new(vec![raw.count, 1, raw.rows, raw.cols], data)?;
    Ok(ImageSet { images, labels, split, dataset })
}

/// Resolves the data root from an explicit path or `CBNET_DATA_ROOT`.
pub fn resolve_data_root(explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(Error::Config(format!("no data root given and {DATA_ROOT_ENV} is unset"))),
    }
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!("missing {stem}[.gz] under {}", dir.display())))
}

impl ImageSet {
    /// Loads `<root>/<dataset>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`.
    pub fn load(root: &Path, dataset: DatasetId, split: Split) -> Result<Self> {
        let dir = root.join(dataset.name());
        let prefix = split.file_prefix();
        let images = load_idx_images(find_file(&dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
        let labels = load_idx_labels(find_file(&dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
        normalize(&images, labels, split, dataset)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        self.images.sample(i)
    }

    /// Image `i` as a `[1,C,H,W]` tensor.
    pub fn image_tensor(&self, i: usize) -> Tensor<f32> {
        let mut shape = vec![1];
        shape.extend_from_slice(self.image_shape());
        Tensor::new(shape, self.image(i).to_vec()).expect("sample shape")
    }

    /// Gathers the images at `indices` into a `[k,C,H,W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let per = self.pixels_per_image();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Tensor::new(shape, data).expect("batch shape")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }

    /// The images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ImageSet {
        ImageSet {
            images: self.batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            dataset: self.dataset,
        }
    }

    /// Back to IDX bytes via `floor(p·255 + 0.5)`.
    pub fn to_idx(&self) -> IdxImages {
        let shape = self.images.shape();
        IdxImages {
            count: shape[0],
            rows: shape[2],
            cols: shape[3],
            pixels: self.images.data().iter().map(|p| (p * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8).collect(),
        }
    }

    pub fn write_idx(&self, images_path: &Path, labels_path: &Path, gzip: bool) -> Result<()> {
        write_idx_images(images_path, &self.to_idx(), gzip)?;
        write_idx_labels(labels_path, &self.labels, gzip)
    }

    /// Count of images per class.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(pixels: Vec<u8>) -> IdxImages {
        IdxImages { count: 1, rows: 1, cols: pixels.len(), pixels }
    }

    #[test]
    fn normalize_values() {
        let set = normalize(&raw(vec![0, 255, 128]), vec![3], Split::Test, DatasetId::Mnist).unwrap();
        assert_eq!(set.images.data()[0], 0.0);
        assert_eq!(set.images.data()[1], 1.0);
        assert!((set.images.data()[2] as f64 - 0.50196078).abs() < 1e-7);
    }

    #[test]
    fn byte_round_trip() {
        let bytes: Vec<u8> = (0..=255).collect();
        let set = normalize(&raw(bytes.clone()), vec![0], Split::Train, DatasetId::Mnist).unwrap();
        assert_eq!(set.to_idx().pixels, bytes);
    }

    #[test]
    fn count_mismatch() {
        assert!(matches!(normalize(&raw(vec![1]), vec![1, 2], Split::Train, DatasetId::Mnist), Err(Error::Data(_))));
    }

    #[test]
    fn dataset_names() {
        for d in DatasetId::ALL {
            assert_eq!(d.name().parse::<DatasetId>().unwrap(), d);
        }
        assert!(matches!("qmnist".parse::<DatasetId>(), Err(Error::Profile(_))));
    }

    #[test]
    fn missing_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = ImageSet::load(dir.path(), DatasetId::Mnist, Split::Test).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
