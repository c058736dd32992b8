use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetId, ImageSet};
use crate::error::{Error, Result};
use crate::models::{Architecture, Network};
use crate::nn::Activation;
use crate::tensor::{argmax, Tensor};

/// Default number of untimed inferences before measurement.
pub const WARMUP: usize = 50;

/// Autoencoder output(s) shaped as classifier input: `[1,28,28]` for one
/// image, `[N,1,28,28]` for a batch.
pub fn convert(ae: &Network, image: &Tensor) -> Result<Tensor> {
    let (x, unbatched) = ae.batch_input(image)?;
    let n = x.shape()[0];
    let out = ae.forward(&x)?;
    let per = out.len() / n;
    let side = (per as f64).sqrt() as usize;
    if side * side != per {
        return Err(Error::Pipeline(format!("autoencoder output of {per} values is not a square image")));
    }
    let shape = if unbatched { vec![1, side, side] } else { vec![n, 1, side, side] };
    out.reshape(shape)
}

/// Converting autoencoder followed by the lightweight classifier.
#[derive(Debug, Clone)]
pub struct CbnetPipeline {
    pub autoencoder: Network,
    pub classifier: Network,
    pub dataset: Option<DatasetId>,
    pub output_activation: Activation,
}

impl CbnetPipeline {
    pub fn new(autoencoder: Network, classifier: Network) -> Result<Self> {
        if autoencoder.meta.architecture != Architecture::ConvertingAutoencoder {
            return Err(Error::Pipeline(format!(
                "first stage is a {}, expected a converting autoencoder",
                autoencoder.meta.architecture.name()
            )));
        }
        if !classifier.meta.architecture.is_classifier() {
            return Err(Error::Pipeline("second stage is not a classifier".into()));
        }
        let produced = autoencoder.exit_output_shape(1)?.iter().product::<usize>();
        let expected = classifier.input_shape().iter().product::<usize>();
        if produced != expected {
            return Err(Error::Pipeline(format!(
                "autoencoder emits {produced} values, classifier expects {:?}",
                classifier.input_shape()
            )));
        }
        let output_activation = autoencoder.meta.output_activation.unwrap_or(Activation::Sigmoid);
        let dataset = autoencoder.meta.dataset.or(classifier.meta.dataset);
        Ok(CbnetPipeline { autoencoder, classifier, dataset, output_activation })
    }

    /// MACs per image of both stages.
    pub fn macs(&self) -> Result<u64> {
        Ok(self.autoencoder.macs_to_exit(1)? + self.classifier.macs_to_exit(self.classifier.final_exit())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbnetOutcome {
    pub class: usize,
    pub t_autoencoder: Duration,
    pub t_classifier: Duration,
}

/// `argmax(classifier(convert(image)))`, timing each stage separately.
pub fn cbnet_infer(p: &CbnetPipeline, image: &Tensor) -> Result<CbnetOutcome> {
    let t0 = Instant::now();
    let converted = convert(&p.autoencoder, image)?;
    let t1 = Instant::now();
    let probs = p.classifier.forward(&converted).map_err(|e| match e {
        Error::Shape(m) => Error::Pipeline(m),
        other => other,
    })?;
    let t2 = Instant::now();
    Ok(CbnetOutcome { class: argmax(probs.data()), t_autoencoder: t1 - t0, t_classifier: t2 - t1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineEvaluation {
    pub images: usize,
    pub accuracy: f64,
    pub total_seconds: f64,
    pub latency_ms: f64,
    pub autoencoder_ms: f64,
    pub classifier_ms: f64,
    /// Mean of `t_ae / (t_ae + t_cls)` over images.
    pub autoencoder_share: f64,
}

/// Sequential batch-1 evaluation after `warmup` untimed inferences.
pub fn evaluate_pipeline(p: &CbnetPipeline, set: &ImageSet, warmup: usize) -> Result<PipelineEvaluation> {
    if set.is_empty() {
        return Err(Error::EmptyInput("pipeline evaluation over an empty set".into()));
    }
    let images: Vec<Tensor> = (0..set.len()).map(|i| set.image_tensor(i)).collect();
    for i in 0..warmup {
        cbnet_infer(p, &images[i % images.len()])?;
    }
    let (mut correct, mut ae, mut cls, mut share) = (0usize, Duration::ZERO, Duration::ZERO, 0.0);
    let start = Instant::now();
    for (img, &label) in images.iter().zip(&set.labels) {
        let o = cbnet_infer(p, img)?;
        correct += (o.class == label as usize) as usize;
        ae += o.t_autoencoder;
        cls += o.t_classifier;
        let both = (o.t_autoencoder + o.t_classifier).as_secs_f64();
        if both > 0.0 {
            share += o.t_autoencoder.as_secs_f64() / both;
        }
    }
    let total = start.elapsed().as_secs_f64();
    let n = set.len() as f64;
    Ok(PipelineEvaluation {
        images: set.len(),
        accuracy: correct as f64 / n,
        total_seconds: total,
        latency_ms: total * 1e3 / n,
        autoencoder_ms: ae.as_secs_f64() * 1e3 / n,
        classifier_ms: cls.as_secs_f64() * 1e3 / n,
        autoencoder_share: share / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetId;
    use crate::models::{build_branchy_lenet, build_converting_autoencoder, build_lightweight, AutoencoderProfile};

    fn pipeline(act: Activation) -> CbnetPipeline {
        let ae = build_converting_autoencoder(&AutoencoderProfile::for_dataset(DatasetId::Mnist), act, 1).unwrap();
        let light = build_lightweight(&build_branchy_lenet(2).unwrap()).unwrap();
        CbnetPipeline::new(ae, light).unwrap()
    }

    #[test]
    fn composition() {
        let p = pipeline(Activation::Sigmoid);
        let img = Tensor::from_fn(vec![1, 28, 28], |i| (i % 17) as f32 / 17.0);
        let c = convert(&p.autoencoder, &img).unwrap();
        assert_eq!(c.shape(), &[1, 28, 28]);
        assert_eq!(c, convert(&p.autoencoder, &img).unwrap());
        assert!(c.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        let manual = argmax(p.classifier.forward(&c).unwrap().data());
        assert_eq!(cbnet_infer(&p, &img).unwrap().class, manual);
    }

    #[test]
    fn softmax_output_sums_to_one() {
        let p = pipeline(Activation::Softmax);
        let c = convert(&p.autoencoder, &Tensor::full(vec![1, 28, 28], 0.3)).unwrap();
        assert!((c.data().iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stage_mismatch() {
        let ae =
            build_converting_autoencoder(&AutoencoderProfile::for_dataset(DatasetId::Mnist), Activation::Sigmoid, 1)
                .unwrap();
        let light = build_lightweight(&build_branchy_lenet(2).unwrap()).unwrap();
        assert!(matches!(CbnetPipeline::new(light.clone(), light), Err(Error::Pipeline(_))));
        assert!(CbnetPipeline::new(ae.clone(), ae).is_err());
    }
}
