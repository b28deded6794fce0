//! Whole-model structural invariants: identity at init, shape
//! preservation over random valid inputs, gradient reachability of every
//! parameter, and weight-file interplay.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spach_core::gradcheck::micro_config;
use spach_core::model::{build, load_weights, param_count, save_weights, SpachModel};
use spach_core::tensor::Tensor;

#[test]
fn identity_at_init_for_multiple_shapes() {
    let config = micro_config();
    let weights = build::<f64>(&config, 123).unwrap();
    let (model, _) = SpachModel::from_weights(&weights, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for dims in [[16usize, 16, 16], [24, 16, 16], [16, 24, 24]] {
        let n: usize = dims.iter().product();
        let x = Tensor::new(
            (0..n).map(|_| rng.random_range(0.0..3.0)).collect(),
            &[1, dims[0], dims[1], dims[2]],
        );
        let y = model.forward(&x).unwrap();
        assert_eq!(y.data(), x.data(), "identity broke at {dims:?}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    // generic weights (randomized head) and generic input: no dead params
    let config = micro_config();
    let mut weights = build::<f64>(&config, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    weights.randomize_entry("head.weight", 0.05, &mut rng);
    weights.randomize_entry("head.bias", 0.05, &mut rng);

    let (model, leaves) = SpachModel::from_weights(&weights, true).unwrap();
    let x = Tensor::new(
        (0..16 * 16 * 16).map(|_| rng.random_range(0.1..1.0)).collect(),
        &[1, 16, 16, 16],
    );
    let y = model.forward(&x).unwrap();
    y.mul(&y).sum_all().backward();

    for (leaf, entry) in leaves.iter().zip(weights.entries()) {
        let grad = leaf.grad().unwrap_or_else(|| panic!("no grad for {}", entry.name));
        assert!(
            grad.iter().any(|&g| g != 0.0),
            "parameter {} received an all-zero gradient",
            entry.name
        );
    }
}

#[test]
fn forward_is_deterministic() {
    let config = micro_config();
    let weights = build::<f32>(&config, 3).unwrap();
    let (model, _) = SpachModel::from_weights(&weights, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::new(
        (0..16 * 16 * 16).map(|_| rng.random_range(0.0f32..1.0)).collect(),
        &[1, 16, 16, 16],
    );
    let a = model.forward(&x).unwrap();
    let b = model.forward(&x).unwrap();
    assert!(a.data().iter().zip(b.data().iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn loaded_weights_forward_exactly_like_saved_ones() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.spw");
    let config = micro_config();
    let mut weights = build::<f32>(&config, 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    weights.randomize_entry("head.weight", 0.05, &mut rng);
    save_weights(&weights, &path).unwrap();
    let loaded = load_weights(&path).unwrap();

    let x = Tensor::new(
        (0..16 * 16 * 16).map(|_| rng.random_range(0.0f32..1.0)).collect(),
        &[1, 16, 16, 16],
    );
    let (m1, _) = SpachModel::from_weights(&weights, false).unwrap();
    let (m2, _) = SpachModel::from_weights(&loaded, false).unwrap();
    let a = m1.forward(&x).unwrap();
    let b = m2.forward(&x).unwrap();
    assert!(a.data().iter().zip(b.data().iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn param_count_agrees_with_build_across_ablation() {
    for use_gcfn in [true, false] {
        let mut config = micro_config();
        config.use_gcfn = use_gcfn;
        let w = build::<f32>(&config, 0).unwrap();
        assert_eq!(param_count(&config), w.total_elements());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    // shape preservation over random valid dims (multiples of 16 keep both
    // token grids window-aligned or paddable)
    #[test]
    fn forward_preserves_any_valid_shape(
        d in 1usize..=2,
        h in 1usize..=2,
        w in 1usize..=2,
        seed in 0u64..50,
    ) {
        let config = micro_config();
        let weights = build::<f32>(&config, seed).unwrap();
        let (model, _) = SpachModel::from_weights(&weights, false).unwrap();
        let dims = [16 * d, 16 * h, 16 * w];
        let n: usize = dims.iter().product();
        let x = Tensor::new(vec![0.25f32; n], &[1, dims[0], dims[1], dims[2]]);
        let y = model.forward(&x).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
    }
}
