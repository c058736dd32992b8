mod common;

use cbnet::data::DatasetId;
use cbnet::nn::{finite_difference_check, Differentiable, LayerSpec};
use common::*;
use proptest::prelude::*;

#[test]
fn every_layer_matches_finite_differences() {
    for (name, spec, input) in layer_cases() {
        let r = layer_check(spec, input, 7);
        assert_eq!(r.probes, PROBES, "{name}");
        assert!(r.max_rel_error < TOL, "{name}: max relative error {:.3e}", r.max_rel_error);
    }
}

#[test]
fn joint_multi_exit_loss() {
    let mut obj = joint_objective(3);
    let r = finite_difference_check(&mut obj, PROBES, EPS, 99, |m, i| m.near_kink(i, EPS)).unwrap();
    assert!(r.probes >= PROBES * 4 / 5, "too many probes skipped ({})", r.skipped);
    assert!(r.max_rel_error < TOL, "max relative error {:.3e} at {:?}", r.max_rel_error, r.worst_index);
}

#[test]
fn reconstruction_loss_all_profiles() {
    for ds in DatasetId::ALL {
        let mut obj = reconstruction_objective(ds, 5);
        let r = finite_difference_check(&mut obj, PROBES, EPS, 17, |m, i| m.near_kink(i, EPS)).unwrap();
        assert!(r.probes + r.skipped == PROBES);
        assert!(r.probes >= PROBES / 2, "{ds}: too many probes skipped ({})", r.skipped);
        assert!(r.max_rel_error < TOL, "{ds}: max relative error {:.3e}", r.max_rel_error);
    }
}

#[test]
fn quadratic_sanity() {
    struct Quad(f64);
    impl Differentiable for Quad {
        fn num_params(&self) -> usize {
            1
        }
        fn get(&self, _: usize) -> f64 {
            self.0
        }
        fn set(&mut self, _: usize, v: f64) {
            self.0 = v;
        }
        fn loss(&mut self) -> cbnet::Result<f64> {
            Ok(self.0 * self.0)
        }
        fn gradient(&mut self) -> cbnet::Result<Vec<f64>> {
            Ok(vec![2.0 * self.0])
        }
    }
    let r = finite_difference_check(&mut Quad(3.0), 5, EPS, 0, |_, _| false).unwrap();
    assert!(r.max_rel_error < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dense_gradients_any_shape(d_in in 1usize..12, d_out in 1usize..9, batch in 1usize..7, seed in 0u64..1000) {
        let r = layer_check(LayerSpec::dense(d_in, d_out), random_tensor(vec![batch, d_in], seed), seed);
        prop_assert!(r.max_rel_error < TOL);
    }

    #[test]
    fn conv_gradients_any_geometry(
        c_in in 1usize..3, filters in 1usize..4, k in 1usize..4, stride in 1usize..3, pad in 0usize..3,
        side in 4usize..8, seed in 0u64..1000,
    ) {
        let r = layer_check(LayerSpec::conv(c_in, filters, k, stride, pad), random_tensor(vec![c_in, side, side], seed), seed);
        prop_assert!(r.max_rel_error < TOL);
    }
}
