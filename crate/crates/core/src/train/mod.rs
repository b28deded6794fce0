//! Training: Charbonnier loss, single-cycle cosine learning-rate schedule,
//! decoupled-weight-decay Adam, cube cropping, and the end-to-end loop over
//! synthetic phantom pairs with CSV metrics and resumable checkpoints.

mod config;
mod loop_;

pub use config::{parse_config, parse_config_file, ConfigError};
pub use loop_::{denoise_volume, load_state, save_state, train, TrainError, TrainReport};

use crate::data::PhantomSpec;
use crate::model::ModelWeights;
use crate::tensor::{Scalar, Tensor};
use std::path::PathBuf;

/// Smooth L1 surrogate: mean of `sqrt((pred - target)² + eps²)`. Equal
/// inputs give exactly `eps`; per-element gradients are bounded by 1/N.
pub fn charbonnier<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Tensor<T> {
    assert_eq!(
        pred.shape(),
        target.shape(),
        "charbonnier shape mismatch: {:?} vs {:?}",
        pred.shape(),
        target.shape()
    );
    assert!(eps > 0.0, "charbonnier eps must be positive");
    let diff = pred.sub(target);
    diff.mul(&diff).add_scalar(T::from_f64(eps * eps)).sqrt().mean_all()
}

/// Single-cycle cosine annealing from `lr_init` (step 0) to `lr_final`
/// (step == total); endpoints are exact.
pub fn cosine_lr(step: u64, total_steps: u64, lr_init: f64, lr_final: f64) -> f64 {
    assert!(step <= total_steps, "step {step} beyond total {total_steps}");
    if step == 0 {
        return lr_init;
    }
    if step == total_steps {
        return lr_final;
    }
    let t = step as f64 / total_steps as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Optimizer state: step counter plus first/second moment buffers aligned
/// with the weight entries.
#[derive(Clone)]
pub struct TrainState<T: Scalar> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub best_val_psnr: f64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(weights: &ModelWeights<T>) -> Self {
        let m = weights.entries().iter().map(|e| vec![T::ZERO; e.values.len()]).collect();
        let v = weights.entries().iter().map(|e| vec![T::ZERO; e.values.len()]).collect();
        TrainState { step: 0, m, v, best_val_psnr: f64::NEG_INFINITY }
    }
}

/// One AdamW update over every weight entry:
/// `w ← w − lr·(m̂/(√v̂ + eps) + wd·w)` with bias-corrected moments.
/// Missing gradients are treated as zero (moments still decay, weight decay
/// still applies). Arithmetic runs in f64 and rounds back to the weight
/// precision, so f32 checkpoints resume bit-exactly.
pub fn adamw_step<T: Scalar>(
    weights: &mut ModelWeights<T>,
    grads: &[Option<Vec<T>>],
    state: &mut TrainState<T>,
    hyper: &AdamWHyper,
) {
    assert_eq!(grads.len(), weights.entries().len(), "one gradient slot per weight entry");
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for (i, entry) in weights.entries_mut().iter_mut().enumerate() {
        let g = grads[i].as_deref();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..entry.values.len() {
            let gj = g.map_or(0.0, |g| g[j].to_f64());
            let mj = hyper.beta1 * m[j].to_f64() + (1.0 - hyper.beta1) * gj;
            let vj = hyper.beta2 * v[j].to_f64() + (1.0 - hyper.beta2) * gj * gj;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let mh = mj / bc1;
            let vh = vj / bc2;
            let w = entry.values[j].to_f64();
            entry.values[j] =
                T::from_f64(w - hyper.lr * (mh / (vh.sqrt() + hyper.eps) + hyper.weight_decay * w));
        }
    }
}

/// Everything the training loop needs beyond the architecture.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub charbonnier_eps: f64,
    pub crop_size: usize,
    pub seed: u64,
    pub dose_fraction: f64,
    pub dose_scale: f64,
    pub train_phantoms: usize,
    pub val_phantoms: usize,
    /// Checkpoint every this many epochs (and always after the last).
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub phantom: PhantomSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            steps_per_epoch: 100,
            batch_size: 2,
            lr_init: 1e-5,
            lr_final: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            charbonnier_eps: 1e-3,
            crop_size: 16,
            seed: 0,
            dose_fraction: 0.25,
            dose_scale: 25.0,
            train_phantoms: 6,
            val_phantoms: 2,
            checkpoint_every: 50,
            out_dir: PathBuf::from("runs/default"),
            resume: None,
            phantom: PhantomSpec::default(),
        }
    }
}

/// Deterministic aligned crops: the same corners cut from input and label.
pub fn crop_cubes(
    input: &crate::data::Volume,
    label: &crate::data::Volume,
    size: usize,
    count: usize,
    seed: u64,
) -> Vec<(crate::data::Volume, crate::data::Volume)> {
    use rand::{Rng, SeedableRng};
    assert_eq!(input.dims(), label.dims(), "crop pair dims differ");
    let dims = input.dims();
    assert!(size > 0 && dims.iter().all(|&d| size <= d), "crop size {size} exceeds dims {dims:?}");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let corner = [
                rng.random_range(0..=dims[0] - size),
                rng.random_range(0..=dims[1] - size),
                rng.random_range(0..=dims[2] - size),
            ];
            (input.crop(corner, [size; 3]), label.crop(corner, [size; 3]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Volume;
    use crate::gradcheck::micro_config;
    use crate::model::build;
    use crate::oracle;

    #[test]
    fn charbonnier_equal_inputs_is_eps() {
        let a = Tensor::new(vec![0.3, 0.7, 1.1], &[3]);
        let l = charbonnier(&a, &a, 1e-3);
        assert_eq!(l.data()[0], 1e-3);
    }

    #[test]
    fn charbonnier_asymptotes_to_l1() {
        let p = Tensor::new(vec![1.0], &[1]);
        let t = Tensor::new(vec![0.0], &[1]);
        let l = charbonnier(&p, &t, 1e-3);
        assert!((l.data()[0] - 1.0000005).abs() < 1e-7, "got {}", l.data()[0]);
    }

    #[test]
    fn charbonnier_gradient_bounded_by_inverse_count() {
        let n = 12usize;
        let p = Tensor::param((0..n).map(|i| i as f64).collect(), &[n]);
        let t = Tensor::new(vec![2.5; n], &[n]);
        charbonnier(&p, &t, 1e-3).backward();
        let g = p.grad().unwrap();
        for v in g {
            assert!(v.abs() <= 1.0 / n as f64 + 1e-15);
        }
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 1000, 1e-5, 1e-8), 1e-5);
        assert_eq!(cosine_lr(1000, 1000, 1e-5, 1e-8), 1e-8);
        let mid = cosine_lr(500, 1000, 1e-5, 1e-8);
        assert!((mid - 5.005e-6).abs() < 1e-12, "got {mid}");
    }

    #[test]
    fn cosine_is_non_increasing() {
        let mut last = f64::INFINITY;
        for step in 0..=1000 {
            let lr = cosine_lr(step, 1000, 1e-5, 1e-8);
            assert!(lr <= last + 1e-18, "lr increased at step {step}");
            last = lr;
        }
    }

    fn scalar_weights(value: f32) -> ModelWeights<f32> {
        let mut w = ModelWeights::empty(micro_config());
        w.push_entry("w".into(), vec![1], vec![value]);
        w
    }

    #[test]
    fn adamw_zero_grad_zero_decay_keeps_weights() {
        let mut w = scalar_weights(0.7);
        let mut s = TrainState::new(&w);
        let h = AdamWHyper { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        adamw_step(&mut w, &[Some(vec![0.0])], &mut s, &h);
        assert_eq!(w.entries()[0].values[0], 0.7);
    }

    #[test]
    fn adamw_closed_form_degenerate_betas() {
        // β1 = β2 = 0, wd = 0, eps = 0, g = 1: every step moves exactly -lr
        let mut w = scalar_weights(1.0);
        let mut s = TrainState::new(&w);
        let h = AdamWHyper { lr: 0.05, beta1: 0.0, beta2: 0.0, eps: 0.0, weight_decay: 0.0 };
        for k in 1..=4 {
            adamw_step(&mut w, &[Some(vec![1.0])], &mut s, &h);
            let expect = 1.0 - 0.05 * k as f32;
            assert!((w.entries()[0].values[0] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn adamw_matches_reference_trajectory_on_quadratic() {
        // f(w) = 0.5·Σ (w - c)², gradient w - c
        let c = [0.3f64, -1.2, 2.0];
        let mut w = ModelWeights::<f64>::empty(micro_config());
        w.push_entry("w".into(), vec![3], vec![1.0, 1.0, 1.0]);
        let mut s = TrainState::new(&w);
        let h = AdamWHyper { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };

        let mut rw = [1.0f64, 1.0, 1.0];
        let mut rm = [0.0f64; 3];
        let mut rv = [0.0f64; 3];
        for t in 1..=10u64 {
            let g: Vec<f64> = w.entries()[0]
                .values
                .iter()
                .zip(c.iter())
                .map(|(w, c)| w - c)
                .collect();
            let rg: Vec<f64> = rw.iter().zip(c.iter()).map(|(w, c)| w - c).collect();
            adamw_step(&mut w, &[Some(g)], &mut s, &h);
            oracle::adamw_reference_step(
                &mut rw, &rg, &mut rm, &mut rv, t, h.lr, h.beta1, h.beta2, h.eps, h.weight_decay,
            );
            for (a, b) in w.entries()[0].values.iter().zip(rw.iter()) {
                assert!((a - b).abs() < 1e-12, "step {t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn adamw_converges_on_quadratic() {
        let c = 0.5f64;
        let mut w = ModelWeights::<f64>::empty(micro_config());
        w.push_entry("w".into(), vec![1], vec![3.0]);
        let mut s = TrainState::new(&w);
        let h = AdamWHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let loss = |w: f64| 0.5 * (w - c) * (w - c);
        let mut last = loss(3.0);
        for _ in 0..100 {
            let wv = w.entries()[0].values[0];
            adamw_step(&mut w, &[Some(vec![wv - c])], &mut s, &h);
            let now = loss(w.entries()[0].values[0]);
            assert!(now < last, "loss must strictly decrease: {now} !< {last}");
            last = now;
        }
    }

    #[test]
    fn crops_are_aligned_and_deterministic() {
        let n = 12usize;
        let data: Vec<f64> = (0..n * n * n).map(|i| i as f64).collect();
        let a = Volume::new([n; 3], [1.0; 3], data.clone()).unwrap();
        let b = Volume::new([n; 3], [1.0; 3], data.iter().map(|v| v * 2.0).collect()).unwrap();
        assert!(crop_cubes(&a, &b, 4, 0, 9).is_empty());
        let crops = crop_cubes(&a, &b, 4, 5, 9);
        assert_eq!(crops.len(), 5);
        for (x, y) in &crops {
            assert_eq!(x.dims(), [4; 3]);
            for (p, q) in x.data().iter().zip(y.data().iter()) {
                assert_eq!(*q, *p * 2.0, "corners must align");
            }
        }
        let again = crop_cubes(&a, &b, 4, 5, 9);
        for ((x, _), (x2, _)) in crops.iter().zip(again.iter()) {
            assert_eq!(x.data(), x2.data());
        }
    }

    #[test]
    fn trainstate_shapes_match_weights() {
        let w = build::<f32>(&micro_config(), 0).unwrap();
        let s = TrainState::new(&w);
        assert_eq!(s.m.len(), w.entries().len());
        for (m, e) in s.m.iter().zip(w.entries()) {
            assert_eq!(m.len(), e.values.len());
        }
    }
}
