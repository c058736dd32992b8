use serde::{Deserialize, Serialize};

use crate::data::{DatasetId, IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::models::network::{Architecture, Network, NetworkMeta};
use crate::nn::{Activation, LayerSpec};

/// Trunk position of the early-exit tap (after conv1, relu, pool).
pub const BRANCH_TAP: usize = 3;

/// Trunk position of the autoencoder's bottleneck activation.
pub const ENCODER_TAP: usize = 6;

pub fn classifier_input_shape() -> Vec<usize> {
    vec![1, IMAGE_SIDE, IMAGE_SIDE]
}

fn lenet_trunk() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(1, 5, 5, 1, 3),
        LayerSpec::Relu,
        LayerSpec::pool(2, 2),
        LayerSpec::conv(5, 10, 5, 1, 3),
        LayerSpec::Relu,
        LayerSpec::pool(2, 2),
        LayerSpec::conv(10, 20, 5, 1, 3),
        LayerSpec::Relu,
        LayerSpec::pool(2, 2),
        LayerSpec::dense(20 * 5 * 5, 84),
        LayerSpec::Relu,
        LayerSpec::dense(84, 10),
        LayerSpec::Softmax,
    ]
}

fn early_branch() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(5, 10, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::pool(2, 2),
        LayerSpec::dense(10 * 7 * 7, 10),
        LayerSpec::Softmax,
    ]
}

/// LeNet main path with one early exit after the first conv block.
pub fn build_branchy_lenet(seed: u64) -> Result<Network> {
    Network::build(
        NetworkMeta::new(Architecture::BranchyLenet, seed),
        classifier_input_shape(),
        lenet_trunk(),
        vec![(BRANCH_TAP, early_branch())],
    )
}

/// The main path alone; initial weights equal the branchy variant's trunk.
pub fn build_lenet(seed: u64) -> Result<Network> {
    Network::build(NetworkMeta::new(Architecture::Lenet, seed), classifier_input_shape(), lenet_trunk(), vec![])
}

/// Truncates a trained branchy network to its first exit: the trunk up to
/// the tap followed by the branch head, with copied weights.
pub fn build_lightweight(trained: &Network) -> Result<Network> {
    let Some(branch) = trained.branches().first() else {
        return Err(Error::Architecture(format!(
            "{} has no early exit to truncate to",
            trained.meta.architecture.name()
        )));
    };
    let mut meta = NetworkMeta::new(Architecture::Lightweight, trained.meta.seed);
    meta.dataset = trained.meta.dataset;
    meta.epochs = trained.meta.epochs;
    let specs = trained.path_specs(1)?;
    let mut light = Network::build(meta, trained.input_shape().to_vec(), specs, vec![])?;

    let sources = trained.trunk()[..branch.tap].iter().chain(&branch.layers);
    let mut dst = light.named_params_mut().into_iter();
    for layer in sources {
        for (_, p) in layer.params() {
            let (_, d) = dst.next().expect("same layer sequence");
            d.value = p.value.clone();
        }
    }
    Ok(light)
}

/// Widths and activations of the four dense layers of a converting autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderProfile {
    pub dataset: DatasetId,
    pub widths: [usize; 4],
    pub activations: [Activation; 3],
}

impl AutoencoderProfile {
    pub fn for_dataset(dataset: DatasetId) -> Self {
        use Activation::{Linear, Relu};
        let (widths, activations) = match dataset {
            DatasetId::Mnist => ([784, 384, 32, IMAGE_PIXELS], [Relu, Relu, Linear]),
            DatasetId::Fmnist => ([512, 256, 128, IMAGE_PIXELS], [Relu, Relu, Linear]),
            DatasetId::Kmnist => ([512, 384, 32, IMAGE_PIXELS], [Relu, Linear, Linear]),
        };
        AutoencoderProfile { dataset, widths, activations }
    }

    /// Looks a profile up by dataset name.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::for_dataset(name.parse()?))
    }

    fn trunk(&self, output: Activation) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(8);
        let mut inputs = IMAGE_PIXELS;
        for (i, &w) in self.widths.iter().enumerate() {
            specs.push(LayerSpec::dense(inputs, w));
            specs.push(LayerSpec::activation(self.activations.get(i).copied().unwrap_or(output)));
            inputs = w;
        }
        specs
    }
}

/// Four dense layers `784 → w1 → w2 → w3 → 784` with the profile's activations.
pub fn build_converting_autoencoder(
    profile: &AutoencoderProfile,
    output_activation: Activation,
    seed: u64,
) -> Result<Network> {
    if profile.widths[3] != IMAGE_PIXELS {
        return Err(Error::Profile(format!("output width {} is not {IMAGE_PIXELS}", profile.widths[3])));
    }
    if !matches!(output_activation, Activation::Sigmoid | Activation::Softmax) {
        return Err(Error::Config(format!(
            "autoencoder output activation must be sigmoid or softmax, got {}",
            output_activation.name()
        )));
    }
    let mut meta = NetworkMeta::new(Architecture::ConvertingAutoencoder, seed);
    meta.dataset = Some(profile.dataset);
    meta.output_activation = Some(output_activation);
    Network::build(meta, vec![IMAGE_PIXELS], profile.trunk(output_activation), vec![])
}
