#![allow(dead_code)]

use cbnet::converter::ReconstructionObjective;
use cbnet::data::{normalize, DatasetId, IdxImages, ImageSet, Split};
use cbnet::early_exit::JointObjective;
use cbnet::models::{build_branchy_lenet, build_converting_autoencoder, AutoencoderProfile};
use cbnet::nn::{finite_difference_check, Activation, GradCheckReport, LayerObjective, LayerSpec};
use cbnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PROBES: usize = 50;
pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Uniform values with magnitude in [0.1, 1], away from the ReLU kink.
pub fn off_kink_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = 0.1 + 0.9 * rng.random::<f64>();
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

pub fn layer_check(spec: LayerSpec, input: Tensor<f64>, seed: u64) -> GradCheckReport {
    let mut obj = LayerObjective::new(spec, input, seed).unwrap().with_random_bias(seed + 1);
    finite_difference_check(&mut obj, PROBES, EPS, seed, |_, _| false).unwrap()
}

/// Each layer kind with the input it is checked on.
pub fn layer_cases() -> Vec<(&'static str, LayerSpec, Tensor<f64>)> {
    vec![
        ("conv 1x4x4, 2 filters 3x3", LayerSpec::conv(1, 2, 3, 1, 0), random_tensor(vec![1, 4, 4], 10)),
        ("conv batch 2, stride 2, pad 1", LayerSpec::conv(3, 4, 3, 2, 1), random_tensor(vec![2, 3, 7, 7], 11)),
        ("conv 5x5 pad 3", LayerSpec::conv(2, 3, 5, 1, 3), random_tensor(vec![2, 6, 6], 12)),
        ("dense 8->4", LayerSpec::dense(8, 4), random_tensor(vec![8], 13)),
        ("dense batch 6", LayerSpec::dense(10, 7), random_tensor(vec![6, 10], 14)),
        ("maxpool 2/2", LayerSpec::pool(2, 2), random_tensor(vec![2, 3, 6, 6], 15)),
        ("maxpool 3/2 odd", LayerSpec::pool(3, 2), random_tensor(vec![1, 2, 7, 7], 16)),
        ("relu", LayerSpec::Relu, off_kink_tensor(vec![3, 12], 17)),
        ("linear", LayerSpec::Linear, random_tensor(vec![3, 12], 18)),
        ("sigmoid", LayerSpec::Sigmoid, random_tensor(vec![3, 12], 19)),
        ("softmax", LayerSpec::Softmax, random_tensor(vec![3, 10], 20)),
    ]
}

/// Weighted two-exit cross-entropy on BranchyNet-LeNet in double precision.
pub fn joint_objective(seed: u64) -> JointObjective {
    let net = build_branchy_lenet(seed).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    JointObjective {
        net,
        input: Tensor::from_fn(vec![3, 1, 28, 28], |_| rng.random::<f64>()),
        labels: vec![3, 7, 0],
        weights: vec![1.0, 0.7],
    }
}

/// MSE + L1 activity on a converting autoencoder. The L1 coefficient is
/// raised so the activity term is visible above rounding.
pub fn reconstruction_objective(dataset: DatasetId, seed: u64) -> ReconstructionObjective {
    let profile = AutoencoderProfile::for_dataset(dataset);
    let net = build_converting_autoencoder(&profile, Activation::Sigmoid, seed).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAA);
    ReconstructionObjective {
        net,
        input: Tensor::from_fn(vec![4, 784], |_| rng.random::<f64>()),
        target: Tensor::from_fn(vec![4, 784], |_| rng.random::<f64>()),
        l1: 1e-3,
    }
}

/// Independent per-layer MAC count: convolutions contribute
/// `H'·W'·C_out·C_in·k²`, dense layers `in·out`, everything else nothing.
#[derive(Debug, Clone, Copy)]
pub enum CountedLayer {
    Conv { c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize },
    Pool { window: usize, stride: usize },
    Dense { d_in: usize, d_out: usize },
}

pub fn count_macs(layers: &[CountedLayer], (mut c, mut h, mut w): (usize, usize, usize)) -> u64 {
    let mut total = 0u64;
    for l in layers {
        match *l {
            CountedLayer::Conv { c_in, c_out, k, stride, pad } => {
                assert_eq!(c, c_in);
                let oh = (h + 2 * pad - k) / stride + 1;
                let ow = (w + 2 * pad - k) / stride + 1;
                total += (oh * ow * c_out * c_in * k * k) as u64;
                (c, h, w) = (c_out, oh, ow);
            }
            CountedLayer::Pool { window, stride } => {
                h = (h - window) / stride + 1;
                w = (w - window) / stride + 1;
            }
            CountedLayer::Dense { d_in, d_out } => {
                assert_eq!(c * h * w, d_in);
                total += (d_in * d_out) as u64;
                (c, h, w) = (d_out, 1, 1);
            }
        }
    }
    total
}

pub fn lenet_layers() -> Vec<CountedLayer> {
    use CountedLayer::*;
    vec![
        Conv { c_in: 1, c_out: 5, k: 5, stride: 1, pad: 3 },
        Pool { window: 2, stride: 2 },
        Conv { c_in: 5, c_out: 10, k: 5, stride: 1, pad: 3 },
        Pool { window: 2, stride: 2 },
        Conv { c_in: 10, c_out: 20, k: 5, stride: 1, pad: 3 },
        Pool { window: 2, stride: 2 },
        Dense { d_in: 500, d_out: 84 },
        Dense { d_in: 84, d_out: 10 },
    ]
}

pub fn lightweight_layers() -> Vec<CountedLayer> {
    use CountedLayer::*;
    vec![
        Conv { c_in: 1, c_out: 5, k: 5, stride: 1, pad: 3 },
        Pool { window: 2, stride: 2 },
        Conv { c_in: 5, c_out: 10, k: 3, stride: 1, pad: 1 },
        Pool { window: 2, stride: 2 },
        Dense { d_in: 490, d_out: 10 },
    ]
}

pub fn autoencoder_layers(widths: [usize; 4]) -> Vec<CountedLayer> {
    let mut d_in = 784;
    widths
        .iter()
        .map(|&d_out| {
            let l = CountedLayer::Dense { d_in, d_out };
            d_in = d_out;
            l
        })
        .collect()
}

/// Synthetic 28x28 set: class `c` lights a 6x6 block at a class-specific
/// position, plus seeded noise.
pub fn synthetic_set(n: usize, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0u8; n * 784];
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    for (i, img) in pixels.chunks_exact_mut(784).enumerate() {
        let c = labels[i] as usize;
        let (r0, c0) = (2 + (c / 5) * 12, 1 + (c % 5) * 5);
        for r in 0..6 {
            for col in 0..6 {
                img[(r0 + r) * 28 + c0 + col] = 200;
            }
        }
        for p in img.iter_mut() {
            *p = p.saturating_add(rng.random_range(0..40));
        }
    }
    let raw = IdxImages { count: n, rows: 28, cols: 28, pixels };
    normalize(&raw, labels, Split::Train, DatasetId::Mnist).unwrap()
}
