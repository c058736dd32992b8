mod common;

use cbnet::bench::{compare, savings_pct, BenchmarkReport};
use cbnet::converter::{
    build_training_pairs, cbnet_infer, convert, train_autoencoder, AutoencoderConfig, CbnetPipeline,
};
use cbnet::data::idx::{encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels};
use cbnet::data::DatasetId;
use cbnet::data::{build_class_index, stratified_subset, Hardness, HardnessLabels, IdxImages};
use cbnet::early_exit::{entropy, exit_profile, infer_with_exit, threshold_grid, train_joint, ExitPolicy, TrainConfig};
use cbnet::energy::{average_power, energy, gci_power, pi_power, PowerModelParams, UtilizationTrace};
use cbnet::models::{
    build_branchy_lenet, build_converting_autoencoder, build_lenet, build_lightweight, AutoencoderProfile, Network,
};
use cbnet::nn::{
    activation, adam_step, cross_entropy_loss, maxpool2d, mse_loss, sgd_step, Activation, AdamState, LayerSpec,
    OptimizerConfig,
};
use cbnet::Tensor;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn probs_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 2..12).prop_filter_map("nonzero mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-9).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn random_flags(n: usize, hard_p: f64, seed: u64) -> HardnessLabels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flags =
        (0..n).map(|i| if i < 10 || rng.random::<f64>() >= hard_p { Hardness::Easy } else { Hardness::Hard }).collect();
    HardnessLabels { flags, threshold: 0.1, checkpoint_id: "synthetic".into() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-1e3f64..1e3, 1..20)) {
        let n = xs.len();
        for y in [
            activation(Activation::Softmax, &Tensor::new(vec![n], xs.clone()).unwrap()).unwrap().data().to_vec(),
            activation(Activation::Softmax, &Tensor::new(vec![n], xs.iter().map(|&x| x as f32).collect()).unwrap())
                .unwrap().data().iter().map(|&v| v as f64).collect(),
        ] {
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn conv_and_pool_shape_formula(h in 1usize..20, w in 1usize..20, k in 1usize..6, s in 1usize..4, p in 0usize..4) {
        prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
        let expect = |n: usize| (n + 2 * p - k) / s + 1;
        let conv = LayerSpec::conv(2, 3, k, s, p);
        prop_assert_eq!(conv.output_shape(&[2, h, w]).unwrap(), vec![3, expect(h), expect(w)]);
        let y = cbnet::nn::conv2d_forward(
            &Tensor::<f64>::zeros(vec![2, h, w]), &Tensor::zeros(vec![3, 2, k, k]), &Tensor::zeros(vec![3]), s, p,
        ).unwrap();
        prop_assert_eq!(y.shape(), &[3, expect(h), expect(w)][..]);
        let pool = LayerSpec::Maxpool2d { window: k, stride: s, padding: p };
        if p == 0 {
            prop_assert_eq!(pool.output_shape(&[2, h, w]).unwrap(), vec![2, expect(h), expect(w)]);
        }
    }

    #[test]
    fn losses_are_nonnegative(o in prop::collection::vec(-5.0f64..5.0, 1..30), seed in 0u64..1000) {
        let t = random_tensor(vec![o.len()], seed);
        let (l, _) = mse_loss(&Tensor::new(vec![o.len()], o.clone()).unwrap(), &t).unwrap();
        prop_assert!(l.total >= 0.0 && l.data >= 0.0);
    }

    #[test]
    fn cross_entropy_zero_only_at_one_hot(p in probs_strategy(), label in 0usize..12) {
        let label = label % p.len();
        let (l, _) = cross_entropy_loss(&Tensor::new(vec![p.len()], p.clone()).unwrap(), label).unwrap();
        prop_assert!(l.total >= 0.0);
        prop_assert_eq!(l.total == 0.0, p[label] == 1.0);
        let mut hot = vec![0.0; p.len()];
        hot[label] = 1.0;
        prop_assert_eq!(cross_entropy_loss(&Tensor::new(vec![p.len()], hot).unwrap(), label).unwrap().0.total, 0.0);
    }

    #[test]
    fn zero_learning_rate_is_identity(seed in 0u64..1000, n in 1usize..40) {
        let p0 = random_tensor(vec![n], seed);
        let g = random_tensor(vec![n], seed + 1);
        let mut p = p0.clone();
        sgd_step(&mut p, &g, 0.0).unwrap();
        prop_assert_eq!(&p, &p0);
        let mut state = AdamState::new(&[n]);
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut state, 0.0, 0.9, 0.999, 1e-8).unwrap();
        }
        prop_assert_eq!(&p, &p0);
        prop_assert_eq!(state.step, 3);
    }

    #[test]
    fn maxpool_ties_are_deterministic(vals in prop::collection::vec(0u8..3, 16)) {
        let x = Tensor::new(vec![1, 4, 4], vals.iter().map(|&v| v as f64).collect()).unwrap();
        let (a, ia) = maxpool2d(&x, 2, 2).unwrap();
        let (b, ib) = maxpool2d(&x, 2, 2).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&ia, &ib);
        // The winner is the lowest linear index holding the window maximum.
        for (o, &i) in ia.iter().enumerate() {
            let (r0, c0) = ((o / 2) * 2, (o % 2) * 2);
            let window = [r0 * 4 + c0, r0 * 4 + c0 + 1, (r0 + 1) * 4 + c0, (r0 + 1) * 4 + c0 + 1];
            let max = window.iter().map(|&j| vals[j]).max().unwrap();
            prop_assert_eq!(i, *window.iter().find(|&&j| vals[j] == max).unwrap());
        }
    }

    #[test]
    fn entropy_bounds(p in probs_strategy()) {
        let h = entropy(&p).unwrap();
        prop_assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn idx_round_trip_is_bit_identical(count in 0usize..6, rows in 1usize..8, cols in 1usize..8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = IdxImages { count, rows, cols, pixels: (0..count * rows * cols).map(|_| rng.random()).collect() };
        let bytes = encode_idx_images(&img);
        let back = parse_idx_images(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(encode_idx_images(&back), bytes);
        let labels: Vec<u8> = (0..count).map(|_| rng.random_range(0..10)).collect();
        prop_assert_eq!(parse_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn stratified_subsets_keep_the_hard_fraction(
        n in 200usize..600, hard_p in 0.05f64..0.6, r1 in 0.1f64..0.9, dr in 0.01f64..0.5, seed in 0u64..100,
    ) {
        let r2 = (r1 + dr).min(1.0);
        prop_assume!(r2 > r1);
        let set = synthetic_set(n, seed);
        let labels = random_flags(n, hard_p, seed);
        let a = stratified_subset(&set, &labels, r1, seed).unwrap();
        let b = stratified_subset(&set, &labels, r2, seed).unwrap();
        let hf = |s: &cbnet::data::Subset| s.hardness.hard_count() as f64 / s.hardness.len() as f64;
        prop_assert!((hf(&a) - hf(&b)).abs() < 2.0 / (r1 * n as f64));
        prop_assert_eq!(stratified_subset(&set, &labels, r1, seed).unwrap().indices, a.indices);
    }

    #[test]
    fn class_index_only_holds_easy_images(n in 20usize..300, hard_p in 0.0f64..0.9, seed in 0u64..100) {
        let set = synthetic_set(n, seed);
        let labels = random_flags(n, hard_p, seed);
        let index = build_class_index(&set, &labels).unwrap();
        for (c, pool) in index.per_class.iter().enumerate() {
            for &i in pool {
                prop_assert!(labels.is_easy(i));
                prop_assert_eq!(set.labels[i] as usize, c);
            }
        }
        prop_assert_eq!(index.total(), labels.easy_count());
        for epoch in 0..3 {
            for p in build_training_pairs(&set, &labels, &index, seed, epoch).unwrap() {
                prop_assert!(labels.is_easy(p.target));
                prop_assert_eq!(set.labels[p.input], set.labels[p.target]);
            }
        }
    }

    #[test]
    fn power_models_monotone_and_bounded(p_idle in 0.0f64..100.0, span in 0.1f64..200.0, beta in 0.1f64..3.0, n in 1u32..8) {
        let gci = PowerModelParams { n, host_cores: 8, p_idle, p_peak: p_idle + span, beta, ..PowerModelParams::gci() };
        let pi = PowerModelParams { p_idle, p_peak: p_idle + span, beta, ..PowerModelParams::pi4() };
        let (mut last_g, mut last_p) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for i in 0..=1000 {
            let u = i as f64 / 1000.0;
            let (g, p) = (gci_power(u, &gci).unwrap(), pi_power(u, &pi).unwrap());
            prop_assert!(g >= last_g && p >= last_p);
            (last_g, last_p) = (g, p);
        }
        let share = n as f64 / 8.0;
        prop_assert_eq!(gci_power(0.0, &gci).unwrap(), share * p_idle);
        prop_assert!((gci_power(1.0, &gci).unwrap() - share * (p_idle + span)).abs() <= 1e-12 * (p_idle + span));
        prop_assert_eq!(pi_power(0.0, &pi).unwrap(), p_idle);
        prop_assert!((pi_power(1.0, &pi).unwrap() - (p_idle + span)).abs() <= 1e-12 * (p_idle + span));
    }

    #[test]
    fn energy_is_bilinear(p in 0.0f64..500.0, t in 0.0f64..1e4) {
        let e = energy(p, t).unwrap();
        prop_assert_eq!(energy(2.0 * p, t).unwrap(), 2.0 * e);
        prop_assert_eq!(energy(p, 2.0 * t).unwrap(), 2.0 * e);
    }

    #[test]
    fn constant_trace_average_is_pointwise(u in 0.0f64..=1.0, len in 1usize..50) {
        let trace = UtilizationTrace::from_values(&vec![u; len]).unwrap();
        for params in [PowerModelParams::gci(), PowerModelParams::pi4()] {
            prop_assert_eq!(average_power(&trace, &params).unwrap(), params.power(u).unwrap());
        }
    }

    #[test]
    fn savings_scale_invariant(e_base in 0.01f64..1e4, e in 0.0f64..1e4, k in 1e-3f64..1e3) {
        let a = savings_pct(e_base, e);
        let b = savings_pct(k * e_base, k * e);
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn report_json_round_trip(lat in 0.0f64..100.0, acc in 0.0f64..100.0, early in 0.0f64..=1.0, e in 0.0f64..1e3) {
        let mut r = sample_report();
        r.latency_ms = lat;
        r.accuracy_pct = acc;
        r.energy_j = e;
        r.exit_fractions = Some(vec![early, 1.0 - early]);
        prop_assert_eq!(BenchmarkReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }
}

fn sample_report() -> BenchmarkReport {
    let json = r#"{
        "schema_version": 1, "tool_version": "0.1.0", "started_at_unix_s": 1.5, "machine_id": "host / cpu",
        "config": {"dataset": "fmnist", "model": "branchynet"},
        "model_id": "abc", "dataset": "fmnist", "model": "branchynet", "images": 100, "accuracy_pct": 90.0,
        "latency_ms": 1.0, "latency_ms_stddev": 0.1, "total_time_s": 0.1, "average_power_w": 3.0,
        "energy_j": 0.3, "energy_j_stddev": 0.01,
        "repeats": [{"total_time_s": 0.1, "latency_ms": 1.0, "energy": {"average_power_w": 3.0, "duration_s": 0.1,
            "energy_j": 0.3, "source": "modeled-pi", "mean_utilization": 0.1, "averaging": "per-sample mean"}}]
    }"#;
    BenchmarkReport::from_json(json).unwrap()
}

#[test]
fn compare_scales_consistently() {
    let base = sample_report();
    let mut cand = sample_report();
    cand.energy_j = 0.12;
    cand.latency_ms = 0.25;
    let c1 = compare(&[base.clone(), cand.clone()], 0).unwrap();
    let (mut b2, mut c2) = (base, cand);
    b2.energy_j *= 7.0;
    c2.energy_j *= 7.0;
    let c2 = compare(&[b2, c2], 0).unwrap();
    assert!((c1.rows[1].energy_savings_pct - c2.rows[1].energy_savings_pct).abs() < 1e-9);
    assert_eq!(c1.rows[1].speedup, 4.0);
}

#[test]
fn construction_is_seed_deterministic() {
    let flat = |n: &Network| -> Vec<u32> {
        n.named_params().iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(flat(&build_branchy_lenet(4).unwrap()), flat(&build_branchy_lenet(4).unwrap()));
    assert_ne!(flat(&build_branchy_lenet(4).unwrap()), flat(&build_branchy_lenet(5).unwrap()));
    for ds in DatasetId::ALL {
        let p = AutoencoderProfile::for_dataset(ds);
        assert_eq!(
            flat(&build_converting_autoencoder(&p, Activation::Sigmoid, 9).unwrap()),
            flat(&build_converting_autoencoder(&p, Activation::Sigmoid, 9).unwrap())
        );
    }
}

#[test]
fn forward_is_bit_deterministic_and_exits_are_distributions() {
    let net = build_branchy_lenet(2).unwrap();
    let set = synthetic_set(12, 3);
    let x = set.batch(&(0..12).collect::<Vec<_>>());
    let a = net.forward_exits(&x).unwrap();
    let b = net.forward_exits(&x).unwrap();
    assert_eq!(a, b);
    for out in &a {
        for row in out.data().chunks(10) {
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let lenet = build_lenet(2).unwrap();
    for row in lenet.forward(&x).unwrap().data().chunks(10) {
        assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn lightweight_equals_early_exit() {
    let net = build_branchy_lenet(6).unwrap();
    let light = build_lightweight(&net).unwrap();
    let set = synthetic_set(20, 1);
    let x = set.batch(&(0..20).collect::<Vec<_>>());
    assert_eq!(light.forward(&x).unwrap().max_abs_diff(&net.forward_exit(&x, 1).unwrap()).unwrap(), 0.0);
}

#[test]
fn gated_inference_is_consistent_and_monotone() {
    let net = build_branchy_lenet(8).unwrap();
    let set = synthetic_set(60, 2);
    let profile = exit_profile(&net, &set, 2).unwrap();
    let mut last = -1.0;
    for t in threshold_grid(100) {
        let f = profile.statistics(&ExitPolicy { thresholds: vec![t], dataset: None }).unwrap().early_fraction();
        assert!(f >= last);
        last = f;
    }
    let policy = ExitPolicy::new(2.2).unwrap();
    for i in 0..set.len() {
        let img = set.image_tensor(i);
        let o = infer_with_exit(&net, &img, &policy).unwrap();
        let probs = net.forward_exit(&img, o.exit).unwrap();
        assert_eq!(o.class, cbnet::Tensor::argmax(&probs));
        assert_eq!(o.exit == 1, o.entropies[0] < 2.2);
        assert!(o.entropies.iter().all(|&h| (0.0..=(10f64).ln() + 1e-9).contains(&h)));
    }
}

#[test]
fn zero_weighted_branch_matches_single_exit_training() {
    let set = synthetic_set(300, 4);
    let cfg =
        TrainConfig { epochs: 2, batch_size: 32, validation: 0, patience: None, seed: 11, ..TrainConfig::default() };
    let mut branchy = build_branchy_lenet(3).unwrap();
    let mut lenet = build_lenet(3).unwrap();
    train_joint(&mut branchy, &set, &TrainConfig { exit_weights: vec![0.0, 1.0], ..cfg.clone() }).unwrap();
    train_joint(&mut lenet, &set, &TrainConfig { exit_weights: vec![1.0], ..cfg }).unwrap();
    let trunk = |n: &Network| -> Vec<u32> {
        n.named_params()
            .iter()
            .filter(|(name, _)| name.starts_with("trunk."))
            .flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(trunk(&branchy), trunk(&lenet));
}

#[test]
fn pipeline_is_a_pure_composition() {
    let ae = build_converting_autoencoder(&AutoencoderProfile::for_dataset(DatasetId::Fmnist), Activation::Sigmoid, 1)
        .unwrap();
    let light = build_lightweight(&build_branchy_lenet(2).unwrap()).unwrap();
    let p = CbnetPipeline::new(ae, light).unwrap();
    let set = synthetic_set(10, 5);
    for i in 0..set.len() {
        let img = set.image_tensor(i);
        let manual = p.classifier.forward(&convert(&p.autoencoder, &img).unwrap()).unwrap();
        assert_eq!(cbnet_infer(&p, &img).unwrap().class, cbnet::Tensor::argmax(&manual));
    }
}

#[test]
fn autoencoder_training_is_deterministic() {
    let set = synthetic_set(120, 6);
    let labels = random_flags(120, 0.5, 6);
    let cfg = AutoencoderConfig { epochs: 2, batch_size: 32, validation: 20, ..AutoencoderConfig::default() };
    let run = || {
        let mut ae =
            build_converting_autoencoder(&AutoencoderProfile::for_dataset(DatasetId::Kmnist), Activation::Sigmoid, 2)
                .unwrap();
        train_autoencoder(&mut ae, &set, &labels, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.loss_curve(), b.loss_curve());
}

#[test]
fn sgd_and_adam_configs_agree_with_scalar_rules() {
    let mut p = Tensor::new(vec![1], vec![1.0f64]).unwrap();
    sgd_step(&mut p, &Tensor::new(vec![1], vec![2.0]).unwrap(), 0.1).unwrap();
    assert!((p.data()[0] - 0.8).abs() < 1e-15);
    assert_eq!(OptimizerConfig::adam_default().lr(), 1e-3);
}
