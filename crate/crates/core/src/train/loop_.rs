//! The training loop: synthetic low-dose/clean phantom pairs, batched cube
//! crops, Charbonnier + AdamW + cosine annealing, per-epoch validation
//! metrics to CSV, and bit-exact resumable checkpoints.

use super::{adamw_step, charbonnier, cosine_lr, AdamWHyper, TrainConfig, TrainState};
use crate::data::{
    dose_reduce, generate_phantom, psnr, ssim, MetricError, Phantom, PhantomError, PhantomSpec,
    Volume, VolumeError,
};
use crate::model::{
    load_weights, save_weights, ModelConfig, ModelError, ModelWeights, SpachModel, WeightsError,
};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {value} at step {step}, aborting")]
    NonFiniteLoss { step: u64, value: f64 },
    #[error("cannot resume: {0}")]
    BadResume(String),
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub first_step_loss: f64,
    pub tail_mean_loss: f64,
    pub final_val_psnr: f64,
    pub final_val_ssim: f64,
    pub noisy_val_psnr: f64,
    pub best_val_psnr: f64,
    pub final_checkpoint: PathBuf,
    pub csv_path: PathBuf,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub(crate) fn volume_to_tensor(v: &Volume) -> Tensor<f32> {
    let [d, h, w] = v.dims();
    Tensor::new(v.data().iter().map(|&x| x as f32).collect(), &[1, d, h, w])
}

pub(crate) fn tensor_to_volume(t: &Tensor<f32>, voxel_size: [f64; 3]) -> Volume {
    let s = t.shape();
    let dims = [s[1], s[2], s[3]];
    let data: Vec<f64> = t.data().iter().map(|&x| (x.max(0.0)) as f64).collect();
    Volume::new(dims, voxel_size, data).expect("clamped output is valid")
}

/// Run one volume through the network (no gradient tracking); negative
/// outputs are clamped to zero activity.
pub fn denoise_volume(weights: &ModelWeights<f32>, v: &Volume) -> Result<Volume, TrainError> {
    let (model, _) = SpachModel::from_weights(weights, false)?;
    let x = volume_to_tensor(v);
    let y = model.forward(&x)?;
    Ok(tensor_to_volume(&y, v.voxel_size()))
}

/// A training or validation pair: low-dose input and the clean phantom that
/// stands in for the normal-dose target.
struct Pair {
    input: Volume,
    label: Volume,
}

fn make_pairs(
    cfg: &TrainConfig,
    count: usize,
    phantom_tag: u64,
    dose_tag: u64,
) -> Result<Vec<(Phantom, Pair)>, TrainError> {
    (0..count)
        .map(|i| {
            let spec =
                PhantomSpec { seed: mix(cfg.seed, phantom_tag + i as u64), ..cfg.phantom.clone() };
            let phantom = generate_phantom(&spec)?;
            let input = dose_reduce(
                &phantom.volume,
                cfg.dose_fraction,
                cfg.dose_scale,
                mix(cfg.seed, dose_tag + i as u64),
            );
            let label = phantom.volume.clone();
            Ok((phantom, Pair { input, label }))
        })
        .collect()
}

fn validate(cfg: &TrainConfig, model: &ModelConfig) -> Result<(), TrainError> {
    model.validate()?;
    let err = |m: String| Err(TrainError::Config(m));
    if cfg.lr_final > cfg.lr_init {
        return err(format!("lr_final {} must be <= lr_init {}", cfg.lr_final, cfg.lr_init));
    }
    if cfg.epochs == 0 || cfg.steps_per_epoch == 0 || cfg.batch_size == 0 {
        return err("epochs, steps_per_epoch and batch_size must be positive".into());
    }
    let req = model.divisibility();
    if cfg.crop_size == 0 || cfg.crop_size % req != 0 {
        return err(format!("crop_size {} must be a positive multiple of {req}", cfg.crop_size));
    }
    if cfg.phantom.dims.iter().any(|&d| d < cfg.crop_size) {
        return err(format!(
            "crop_size {} exceeds phantom dims {:?}",
            cfg.crop_size, cfg.phantom.dims
        ));
    }
    if !(cfg.dose_fraction > 0.0 && cfg.dose_fraction <= 1.0) {
        return err(format!("dose_fraction {} must be in (0, 1]", cfg.dose_fraction));
    }
    if cfg.dose_scale <= 0.0 {
        return err("dose_scale must be positive".into());
    }
    if cfg.train_phantoms == 0 {
        return err("need at least one training phantom".into());
    }
    if cfg.charbonnier_eps <= 0.0 {
        return err("charbonnier_eps must be positive".into());
    }
    if cfg.checkpoint_every == 0 {
        return err("checkpoint_every must be positive".into());
    }
    Ok(())
}

const META_STATE: &str = "__meta.state";

/// Write the optimizer sidecar: per weight `<name>.m` / `<name>.v` moment
/// entries plus the step counter and best validation PSNR, in the same
/// container format as the weights.
pub fn save_state(
    weights: &ModelWeights<f32>,
    state: &TrainState<f32>,
    path: &Path,
) -> Result<(), WeightsError> {
    use crate::model::weights_io::{f32s_to_bytes, write_container, RawEntry};
    let mut entries = Vec::with_capacity(weights.entries().len() * 2 + 1);
    let words: Vec<u32> = {
        let step = state.step;
        let best = state.best_val_psnr.to_bits();
        vec![(step >> 32) as u32, step as u32, (best >> 32) as u32, best as u32]
    };
    let mut meta_payload = Vec::with_capacity(words.len() * 4);
    for w in words {
        meta_payload.extend_from_slice(&w.to_le_bytes());
    }
    entries.push(RawEntry { name: META_STATE.into(), shape: vec![4], payload: meta_payload });
    for (i, e) in weights.entries().iter().enumerate() {
        entries.push(RawEntry {
            name: format!("{}.m", e.name),
            shape: e.shape.clone(),
            payload: f32s_to_bytes(&state.m[i]),
        });
        entries.push(RawEntry {
            name: format!("{}.v", e.name),
            shape: e.shape.clone(),
            payload: f32s_to_bytes(&state.v[i]),
        });
    }
    write_container(path, &entries)
}

/// Read the optimizer sidecar back, validated against the weight entries.
pub fn load_state(weights: &ModelWeights<f32>, path: &Path) -> Result<TrainState<f32>, TrainError> {
    use crate::model::weights_io::{bytes_to_f32s, read_container};
    let raw = read_container(path)?;
    let mut map: std::collections::HashMap<String, (Vec<usize>, Vec<u8>)> =
        raw.into_iter().map(|e| (e.name, (e.shape, e.payload))).collect();
    let (_, meta) = map
        .remove(META_STATE)
        .ok_or_else(|| TrainError::BadResume("optimizer state has no step metadata".into()))?;
    if meta.len() != 16 {
        return Err(TrainError::BadResume("malformed state metadata".into()));
    }
    let word = |i: usize| u32::from_le_bytes(meta[4 * i..4 * i + 4].try_into().unwrap()) as u64;
    let step = (word(0) << 32) | word(1);
    let best_val_psnr = f64::from_bits((word(2) << 32) | word(3));

    let mut m = Vec::with_capacity(weights.entries().len());
    let mut v = Vec::with_capacity(weights.entries().len());
    for e in weights.entries() {
        for (suffix, dst) in [(".m", &mut m), (".v", &mut v)] {
            let key = format!("{}{suffix}", e.name);
            let (shape, payload) = map
                .remove(&key)
                .ok_or_else(|| TrainError::BadResume(format!("missing moment entry {key}")))?;
            if shape != e.shape {
                return Err(TrainError::BadResume(format!("moment entry {key} shape mismatch")));
            }
            dst.push(bytes_to_f32s(&payload));
        }
    }
    if !map.is_empty() {
        return Err(TrainError::BadResume("unexpected extra entries in optimizer state".into()));
    }
    Ok(TrainState { step, m, v, best_val_psnr })
}

fn checkpoint(
    weights: &ModelWeights<f32>,
    state: &TrainState<f32>,
    dir: &Path,
    epoch: usize,
) -> Result<PathBuf, TrainError> {
    let path = dir.join(format!("checkpoint_{epoch:04}.spw"));
    save_weights(weights, &path)?;
    save_state(weights, state, &path.with_extension("spw.opt"))?;
    Ok(path)
}

/// Train on synthetic phantom pairs. Deterministic given (configs, seed):
/// the phantom corpus derives from the seed, and every step's batch
/// selection derives from (seed, global step), so resuming from a
/// checkpoint reproduces the uninterrupted run bit-exactly.
pub fn train(cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<TrainReport, TrainError> {
    validate(cfg, model_cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;

    let (mut weights, mut state, start_epoch) = match &cfg.resume {
        None => {
            let w = crate::model::build::<f32>(model_cfg, cfg.seed)?;
            let s = TrainState::new(&w);
            (w, s, 0usize)
        }
        Some(path) => {
            let w = load_weights(path)?;
            if w.config != *model_cfg {
                return Err(TrainError::BadResume(
                    "checkpoint config does not match the requested model config".into(),
                ));
            }
            let s = load_state(&w, &path.with_extension("spw.opt"))?;
            if s.step % cfg.steps_per_epoch as u64 != 0 {
                return Err(TrainError::BadResume(format!(
                    "checkpoint step {} is not an epoch boundary of {} steps",
                    s.step, cfg.steps_per_epoch
                )));
            }
            let epoch = (s.step / cfg.steps_per_epoch as u64) as usize;
            if epoch > cfg.epochs {
                return Err(TrainError::BadResume("checkpoint beyond configured epochs".into()));
            }
            (w, s, epoch)
        }
    };

    let train_pairs = make_pairs(cfg, cfg.train_phantoms, 0x1000, 0x2000)?;
    let val_pairs = make_pairs(cfg, cfg.val_phantoms, 0x3000, 0x4000)?;

    let csv_path = cfg.out_dir.join("metrics.csv");
    let mut csv = if start_epoch == 0 {
        let mut f = fs::File::create(&csv_path)?;
        writeln!(f, "step,epoch,lr,train_loss,val_psnr,val_ssim")?;
        f
    } else {
        fs::OpenOptions::new().create(true).append(true).open(&csv_path)?
    };

    let total_steps = (cfg.epochs * cfg.steps_per_epoch) as u64;
    let hyper_base = AdamWHyper {
        lr: 0.0,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    let crop = cfg.crop_size;

    let mut first_step_loss = f64::NAN;
    let mut tail: std::collections::VecDeque<f64> = std::collections::VecDeque::new();
    let tail_cap = 20usize;
    let mut final_checkpoint = cfg.out_dir.join(format!("checkpoint_{start_epoch:04}.spw"));
    let mut last_val = (f64::NAN, f64::NAN);

    for epoch in start_epoch..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr_init;
        for s in 0..cfg.steps_per_epoch {
            let global = (epoch * cfg.steps_per_epoch + s) as u64;
            lr = cosine_lr(global, total_steps, cfg.lr_init, cfg.lr_final);
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x5000 + global));

            let (model, leaves) = SpachModel::from_weights(&weights, true)?;
            let mut losses: Vec<Tensor<f32>> = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let pair = &train_pairs[rng.random_range(0..train_pairs.len())].1;
                let dims = pair.input.dims();
                let corner = [
                    rng.random_range(0..=dims[0] - crop),
                    rng.random_range(0..=dims[1] - crop),
                    rng.random_range(0..=dims[2] - crop),
                ];
                let x = volume_to_tensor(&pair.input.crop(corner, [crop; 3]));
                let y = volume_to_tensor(&pair.label.crop(corner, [crop; 3]));
                let pred = model.forward(&x)?;
                losses.push(charbonnier(&pred, &y, cfg.charbonnier_eps));
            }
            let total = losses
                .iter()
                .skip(1)
                .fold(losses[0].clone(), |acc, l| acc.add(l))
                .scale(1.0 / cfg.batch_size as f32);
            let loss_value = total.data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: global, value: loss_value });
            }
            if global == 0 {
                first_step_loss = loss_value;
            }
            if tail.len() == tail_cap {
                tail.pop_front();
            }
            tail.push_back(loss_value);
            epoch_loss += loss_value;

            total.backward();
            let grads: Vec<Option<Vec<f32>>> = leaves.iter().map(|l| l.grad()).collect();
            let hyper = AdamWHyper { lr, ..hyper_base };
            adamw_step(&mut weights, &grads, &mut state, &hyper);
        }
        epoch_loss /= cfg.steps_per_epoch as f64;

        let (val_psnr, val_ssim) = if val_pairs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let mut psnr_acc = 0.0;
            let mut ssim_acc = 0.0;
            for (phantom, pair) in &val_pairs {
                let denoised = denoise_volume(&weights, &pair.input)?;
                psnr_acc += psnr(&denoised, &phantom.volume)?;
                ssim_acc += ssim(&denoised, &phantom.volume)?;
            }
            (psnr_acc / val_pairs.len() as f64, ssim_acc / val_pairs.len() as f64)
        };
        if val_psnr.is_finite() && val_psnr > state.best_val_psnr {
            state.best_val_psnr = val_psnr;
        }
        last_val = (val_psnr, val_ssim);

        writeln!(
            csv,
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e}",
            (epoch + 1) * cfg.steps_per_epoch,
            epoch + 1,
            lr,
            epoch_loss,
            val_psnr,
            val_ssim
        )?;

        if (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs {
            final_checkpoint = checkpoint(&weights, &state, &cfg.out_dir, epoch + 1)?;
        }
    }

    let noisy_val_psnr = if val_pairs.is_empty() {
        f64::NAN
    } else {
        let mut acc = 0.0;
        for (phantom, pair) in &val_pairs {
            acc += psnr(&pair.input, &phantom.volume)?;
        }
        acc / val_pairs.len() as f64
    };

    let final_path = cfg.out_dir.join("final.spw");
    save_weights(&weights, &final_path)?;
    save_state(&weights, &state, &final_path.with_extension("spw.opt"))?;

    Ok(TrainReport {
        epochs_run: cfg.epochs - start_epoch,
        first_step_loss,
        tail_mean_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        final_val_psnr: last_val.0,
        final_val_ssim: last_val.1,
        noisy_val_psnr,
        best_val_psnr: state.best_val_psnr,
        final_checkpoint,
        csv_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::micro_config;
    use tempfile::tempdir;

    fn tiny_config(dir: &Path) -> (TrainConfig, ModelConfig) {
        let model = micro_config();
        let cfg = TrainConfig {
            epochs: 2,
            steps_per_epoch: 3,
            batch_size: 1,
            lr_init: 1e-3,
            lr_final: 1e-5,
            crop_size: 16,
            seed: 11,
            dose_scale: 50.0,
            train_phantoms: 2,
            val_phantoms: 1,
            checkpoint_every: 1,
            out_dir: dir.to_path_buf(),
            phantom: PhantomSpec {
                dims: [16, 16, 16],
                organ_count: 1,
                tumor_count: 1,
                tumor_radius_mm: (2.0, 3.0),
                ..PhantomSpec::default()
            },
            ..TrainConfig::default()
        };
        (cfg, model)
    }

    #[test]
    fn tiny_run_produces_csv_and_checkpoints() {
        let dir = tempdir().unwrap();
        let (cfg, model) = tiny_config(dir.path());
        let report = train(&cfg, &model).unwrap();
        assert!(report.first_step_loss.is_finite());
        assert!(report.final_checkpoint.exists());
        let csv = fs::read_to_string(&report.csv_path).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,epoch,lr,train_loss,val_psnr,val_ssim");
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn training_is_reproducible() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let (mut cfg, model) = tiny_config(dir_a.path());
        let a = train(&cfg, &model).unwrap();
        cfg.out_dir = dir_b.path().to_path_buf();
        let b = train(&cfg, &model).unwrap();
        let csv_a = fs::read_to_string(&a.csv_path).unwrap();
        let csv_b = fs::read_to_string(&b.csv_path).unwrap();
        assert_eq!(csv_a, csv_b, "identical seed and config must give identical loss curves");
    }

    #[test]
    fn resume_reproduces_uninterrupted_run_bit_exactly() {
        let dir_full = tempdir().unwrap();
        let dir_resume = tempdir().unwrap();
        let (cfg, model) = tiny_config(dir_full.path());

        // uninterrupted run; checkpoint_every=1 leaves a mid-run checkpoint
        train(&cfg, &model).unwrap();
        let full_weights = load_weights(&cfg.out_dir.join("final.spw")).unwrap();

        // restart from the end-of-epoch-1 checkpoint and finish the schedule
        let mut resumed = cfg.clone();
        resumed.out_dir = dir_resume.path().to_path_buf();
        resumed.resume = Some(cfg.out_dir.join("checkpoint_0001.spw"));
        let r = train(&resumed, &model).unwrap();
        assert_eq!(r.epochs_run, 1);
        let resumed_weights = load_weights(&resumed.out_dir.join("final.spw")).unwrap();

        for (a, b) in full_weights.entries().iter().zip(resumed_weights.entries().iter()) {
            assert_eq!(a.name, b.name);
            assert!(
                a.values.iter().zip(b.values.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "weights diverged at {}",
                a.name
            );
        }
    }

    #[test]
    fn state_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let w = crate::model::build::<f32>(&micro_config(), 5).unwrap();
        let mut s = TrainState::new(&w);
        s.step = 42;
        s.best_val_psnr = 31.25;
        for m in &mut s.m {
            for (i, v) in m.iter_mut().enumerate() {
                *v = i as f32 * 0.5;
            }
        }
        let path = dir.path().join("state.opt");
        save_state(&w, &s, &path).unwrap();
        let r = load_state(&w, &path).unwrap();
        assert_eq!(r.step, 42);
        assert_eq!(r.best_val_psnr, 31.25);
        assert_eq!(r.m, s.m);
        assert_eq!(r.v, s.v);
    }
}
