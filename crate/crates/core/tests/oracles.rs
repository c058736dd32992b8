//! Independent reference computations checked against the library.

mod common;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use cbnet::converter::{build_training_pairs, train_autoencoder, AutoencoderConfig};
use cbnet::data::{build_class_index, resolve_data_root, DatasetId, Hardness, HardnessLabels, ImageSet, Split};
use cbnet::early_exit::{entropy, train_joint, TrainConfig};
use cbnet::energy::{energy, gci_power, pi_power, sample_utilization, PowerModelParams};
use cbnet::models::{
    build_branchy_lenet, build_converting_autoencoder, build_lenet, build_lightweight, AutoencoderProfile,
};
use cbnet::nn::{
    adam_step, conv2d_forward, cross_entropy_loss, dense_forward, l1_activity_penalty, Activation, AdamState,
};
use cbnet::Tensor;
use common::*;
use proptest::prelude::*;

/// Direct cross-correlation with zero padding, one output cell at a time.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    b: &[f64],
    c_out: usize,
    k: usize,
    s: usize,
    p: usize,
) -> Vec<f64> {
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b[o];
                for c in 0..c_in {
                    for u in 0..k {
                        for v in 0..k {
                            let (r, q) = ((i * s + u) as isize - p as isize, (j * s + v) as isize - p as isize);
                            if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < w {
                                acc += wt[((o * c_in + c) * k + u) * k + v] * x[(c * h + r as usize) * w + q as usize];
                            }
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    out
}

/// Integer-valued entries: every partial sum is exact, so any summation
/// order gives identical bits.
fn integer_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let t = random_tensor(shape, seed);
    Tensor::from_fn(t.shape().to_vec(), |i| (t.data()[i] * 8.0).round())
}

#[test]
fn conv_matches_naive_loop_exactly() {
    let x = integer_tensor(vec![1, 3, 3], 1);
    let wt = integer_tensor(vec![1, 1, 5, 5], 2);
    let b = Tensor::new(vec![1], vec![0.0]).unwrap();
    let y = conv2d_forward(&x, &wt, &b, 1, 3).unwrap();
    assert_eq!(y.shape(), &[1, 5, 5]);
    let reference = naive_conv(x.data(), 1, 3, 3, wt.data(), b.data(), 1, 5, 1, 3);
    assert_eq!(y.data(), &reference[..]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_naive_loop(
        c_in in 1usize..4, c_out in 1usize..4, k in 1usize..5, s in 1usize..3, p in 0usize..3,
        h in 3usize..9, w in 3usize..9, seed in 0u64..1000,
    ) {
        prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
        let x = random_tensor(vec![c_in, h, w], seed);
        let wt = random_tensor(vec![c_out, c_in, k, k], seed + 1);
        let b = random_tensor(vec![c_out], seed + 2);
        let y = conv2d_forward(&x, &wt, &b, s, p).unwrap();
        let reference = naive_conv(x.data(), c_in, h, w, wt.data(), b.data(), c_out, k, s, p);
        for (a, r) in y.data().iter().zip(&reference) {
            prop_assert!((a - r).abs() <= 1e-12 * (1.0 + r.abs()));
        }
    }
}

#[test]
fn small_hand_values() {
    let y = dense_forward(
        &Tensor::new(vec![2], vec![4.0, 5.0]).unwrap(),
        &Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(),
        &Tensor::new(vec![1], vec![3.0]).unwrap(),
    )
    .unwrap();
    assert_eq!(y.data(), &[17.0]);

    let (ce, _) = cross_entropy_loss(&Tensor::new(vec![2], vec![0.9, 0.1]).unwrap(), 1).unwrap();
    assert!((ce.total - std::f64::consts::LN_10).abs() < 1e-6);
    assert!((entropy(&[0.9, 0.1]).unwrap() - 0.325083).abs() < 1e-6);
    assert!((entropy(&[0.1f64; 10]).unwrap() - (10f64).ln()).abs() < 1e-12);

    let (l1, _) = l1_activity_penalty(&Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap(), 1e-8).unwrap();
    assert!((l1.total - 6e-8).abs() < 1e-20);
    let (l1, _) = l1_activity_penalty(&Tensor::full(vec![784], 0.5), 1e-8).unwrap();
    assert!((l1.total - 3.92e-6).abs() < 1e-18);

    // t = 1: m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
    let mut theta = Tensor::new(vec![1], vec![0.0f64]).unwrap();
    let mut state = AdamState::new(&[1]);
    adam_step(&mut theta, &Tensor::new(vec![1], vec![0.5]).unwrap(), &mut state, 1e-3, 0.9, 0.999, 1e-8).unwrap();
    assert!((theta.data()[0] - -1e-3 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
    assert!((theta.data()[0] - -9.9999998e-4).abs() < 1e-11);
}

#[test]
fn power_anchor_values() {
    let gci = PowerModelParams::gci();
    let pi = PowerModelParams::pi4();
    // 0.5^0.75 = 0.59460356 evaluated independently of the library.
    let half = 0.594_603_557_501_360_5_f64;
    let cases_gci = [(0.0, 40.0 / 9.0), (0.5, (40.0 + 140.0 * half) / 9.0), (1.0, 20.0)];
    for (u, want) in cases_gci {
        let got = gci_power(u, &gci).unwrap();
        assert!((got - want).abs() / want < 1e-9, "gci({u}) = {got}, want {want}");
    }
    assert!((gci_power(0.0, &gci).unwrap() - 4.4444).abs() < 1e-4);
    assert!((gci_power(0.5, &gci).unwrap() - 13.693833).abs() < 1e-6);
    for (u, want) in [(0.0, 2.7), (0.25, 3.625), (0.5, 4.55), (0.75, 5.475), (1.0, 6.4)] {
        let got = pi_power(u, &pi).unwrap();
        assert!((got - want).abs() / want < 1e-9, "pi({u}) = {got}");
    }
    assert!((energy(17.7, 1.0).unwrap() - 17.7).abs() < 1e-12);
}

#[test]
fn parameter_counts_match_closed_form() {
    let conv = |c_in: usize, c_out: usize, k: usize| c_out * c_in * k * k + c_out;
    let dense = |i: usize, o: usize| i * o + o;
    let main = conv(1, 5, 5) + conv(5, 10, 5) + conv(10, 20, 5) + dense(500, 84) + dense(84, 10);
    let branch = conv(5, 10, 3) + dense(490, 10);
    assert_eq!(build_lenet(0).unwrap().param_count(), main);
    assert_eq!(build_branchy_lenet(0).unwrap().param_count(), main + branch);
    assert_eq!(build_lightweight(&build_branchy_lenet(0).unwrap()).unwrap().param_count(), conv(1, 5, 5) + branch);
    for ds in DatasetId::ALL {
        let p = AutoencoderProfile::for_dataset(ds);
        let w = p.widths;
        let want = dense(784, w[0]) + dense(w[0], w[1]) + dense(w[1], w[2]) + dense(w[2], w[3]);
        assert_eq!(build_converting_autoencoder(&p, Activation::Sigmoid, 0).unwrap().param_count(), want, "{ds}");
    }
}

#[test]
fn mac_counts_match_per_layer_oracle() {
    let lenet = build_lenet(0).unwrap();
    assert_eq!(lenet.macs_to_exit(1).unwrap(), count_macs(&lenet_layers(), (1, 28, 28)));
    assert_eq!(count_macs(&lenet_layers(), (1, 28, 28)), 1_016_590);
    let light = build_lightweight(&build_branchy_lenet(0).unwrap()).unwrap();
    assert_eq!(light.macs_to_exit(1).unwrap(), count_macs(&lightweight_layers(), (1, 28, 28)));
    for ds in DatasetId::ALL {
        let p = AutoencoderProfile::for_dataset(ds);
        let ae = build_converting_autoencoder(&p, Activation::Sigmoid, 0).unwrap();
        assert_eq!(ae.macs_to_exit(1).unwrap(), count_macs(&autoencoder_layers(p.widths), (784, 1, 1)), "{ds}");
    }
}

#[test]
fn autoencoder_profiles_follow_the_architecture_table() {
    assert_eq!(AutoencoderProfile::for_dataset(DatasetId::Mnist).widths, [784, 384, 32, 784]);
    assert_eq!(AutoencoderProfile::for_dataset(DatasetId::Fmnist).widths, [512, 256, 128, 784]);
    assert_eq!(AutoencoderProfile::for_dataset(DatasetId::Kmnist).widths, [512, 384, 32, 784]);
    let light = build_lightweight(&build_branchy_lenet(0).unwrap()).unwrap();
    let specs = light.path_specs(1).unwrap();
    let convs = specs.iter().filter(|s| matches!(s, cbnet::nn::LayerSpec::Conv2d { .. })).count();
    let dense = specs.iter().filter(|s| matches!(s, cbnet::nn::LayerSpec::Dense { .. })).count();
    assert_eq!((convs, dense), (2, 1));
}

#[test]
fn target_draws_are_uniform_within_class() {
    // Class 0 has 8 easy exemplars; count how often each is drawn.
    let n = 400;
    let set = synthetic_set(n, 0);
    let flags = (0..n).map(|i| if i % 10 != 0 || i < 80 { Hardness::Easy } else { Hardness::Hard }).collect();
    let labels = HardnessLabels { flags, threshold: 0.1, checkpoint_id: "x".into() };
    let index = build_class_index(&set, &labels).unwrap();
    let pool = index.easy_of(0).to_vec();
    assert_eq!(pool.len(), 8);
    let mut counts = vec![0usize; set.len()];
    let mut draws = 0usize;
    for epoch in 0..500 {
        for p in build_training_pairs(&set, &labels, &index, 7, epoch).unwrap() {
            if set.labels[p.input] == 0 {
                counts[p.target] += 1;
                draws += 1;
            }
        }
    }
    let expect = draws as f64 / pool.len() as f64;
    let sigma = (draws as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
    let chi2: f64 = pool.iter().map(|&i| (counts[i] as f64 - expect).powi(2) / expect).sum();
    for &i in &pool {
        assert!((counts[i] as f64 - expect).abs() < 3.0 * sigma, "exemplar {i}: {} vs {expect}", counts[i]);
    }
    // 7 degrees of freedom, p = 0.001.
    assert!(chi2 < 24.32, "chi-square {chi2}");
}

#[test]
fn busy_process_reports_more_utilization_than_idle() {
    let measure = |busy: bool| {
        let stop = Arc::new(AtomicBool::new(false));
        let s2 = stop.clone();
        let sampler = std::thread::spawn(move || sample_utilization(Duration::from_millis(20), &s2).unwrap());
        let start = std::time::Instant::now();
        let mut x = 0u64;
        while start.elapsed() < Duration::from_millis(300) {
            if busy {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
            } else {
                std::thread::sleep(Duration::from_millis(5));
            }
        }
        std::hint::black_box(x);
        stop.store(true, Ordering::SeqCst);
        sampler.join().unwrap().mean_utilization().unwrap()
    };
    let idle = measure(false);
    let busy = measure(true);
    assert!(busy > idle, "busy {busy} vs idle {idle}");
}

fn data_root() -> Option<PathBuf> {
    let root =
        resolve_data_root(None).ok().unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    root.join("mnist").is_dir().then_some(root)
}

#[test]
fn mnist_files_have_published_sizes() {
    let Some(root) = data_root() else {
        eprintln!("MNIST not found; skipped");
        return;
    };
    let train = ImageSet::load(&root, DatasetId::Mnist, Split::Train).unwrap();
    assert_eq!((train.len(), train.image_shape()), (60_000, &[1usize, 28, 28][..]));
    assert_eq!(ImageSet::load(&root, DatasetId::Mnist, Split::Test).unwrap().len(), 10_000);
}

#[test]
fn trainers_reduce_loss_on_mnist_subsets() {
    let Some(root) = data_root() else {
        eprintln!("MNIST not found; skipped");
        return;
    };
    let train = ImageSet::load(&root, DatasetId::Mnist, Split::Train).unwrap();

    let small = train.select(&(0..512).collect::<Vec<_>>());
    let mut net = build_branchy_lenet(0).unwrap();
    let cfg = TrainConfig { epochs: 5, batch_size: 32, validation: 0, patience: None, ..TrainConfig::default() };
    let curve = train_joint(&mut net, &small, &cfg).unwrap().loss_curve();
    assert!(curve[4] < curve[0], "{curve:?}");

    let subset = train.select(&(0..1000).collect::<Vec<_>>());
    let flags = (0..1000).map(|i| if i % 3 == 0 { Hardness::Easy } else { Hardness::Hard }).collect();
    let labels = HardnessLabels { flags, threshold: 0.05, checkpoint_id: "x".into() };
    let mut ae =
        build_converting_autoencoder(&AutoencoderProfile::for_dataset(DatasetId::Mnist), Activation::Sigmoid, 0)
            .unwrap();
    let cfg = AutoencoderConfig { epochs: 10, validation: 0, patience: None, ..AutoencoderConfig::default() };
    let report = train_autoencoder(&mut ae, &subset, &labels, &cfg).unwrap();
    let curve = report.loss_curve();
    assert!(curve[9] < curve[0], "{curve:?}");
    for s in &report.steps {
        assert!((s.total - (s.data + s.regularization)).abs() <= 1e-12 * s.total.max(1.0));
    }
}
