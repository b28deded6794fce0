//! Flat `key=value` run configuration: one assignment per line, `#` starts
//! a comment, unknown keys are errors.

use super::TrainConfig;
use crate::model::ModelConfig;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected key=value, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse::<T>().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        reason: format!("cannot parse `{value}`"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            reason: format!("expected true/false, got `{value}`"),
        }),
    }
}

fn parse_list<T: std::str::FromStr, const N: usize>(
    key: &str,
    value: &str,
) -> Result<[T; N], ConfigError>
where
    T: Copy + Default,
{
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(ConfigError::BadValue {
            key: key.to_string(),
            reason: format!("expected {N} comma-separated values, got {}", parts.len()),
        });
    }
    let mut out = [T::default(); N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_scalar(key, p)?;
    }
    Ok(out)
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64), ConfigError> {
    let [lo, hi] = parse_list::<f64, 2>(key, value)?;
    Ok((lo, hi))
}

/// Parse configuration text into a training config and model config.
/// Defaults are desk-scale (C = 6, window 2, 16³ crops) with the training
/// schedule fields defaulting to the full 300-epoch recipe.
pub fn parse_config(text: &str) -> Result<(TrainConfig, ModelConfig), ConfigError> {
    let mut train = TrainConfig::default();
    let mut model = ModelConfig::with_channels(6);
    let mut embed_set = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::BadLine { line: lineno + 1, text: raw.to_string() });
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            // architecture
            "channels" => {
                model.base_channels = parse_scalar(key, value)?;
                if !embed_set {
                    model.embed_dim = 4 * model.base_channels;
                }
            }
            "patch_size" => model.patch_size = parse_scalar(key, value)?,
            "window" => model.window = parse_scalar(key, value)?,
            "embed_dim" => {
                model.embed_dim = parse_scalar(key, value)?;
                embed_set = true;
            }
            "heads_spatial" => model.heads_spatial = parse_list(key, value)?,
            "heads_channel" => model.heads_channel = parse_list(key, value)?,
            "enc_blocks" => model.enc_blocks = parse_list(key, value)?,
            "dec_blocks" => model.dec_blocks = parse_list(key, value)?,
            "refine_blocks" => model.refine_blocks = parse_scalar(key, value)?,
            "spatial_blocks" => model.spatial_blocks = parse_list(key, value)?,
            "ffn_expansion" => model.ffn_expansion = parse_scalar(key, value)?,
            "mlp_ratio" => model.mlp_ratio = parse_scalar(key, value)?,
            "use_gcfn" => model.use_gcfn = parse_bool(key, value)?,
            "ln_eps" => model.ln_eps = parse_scalar(key, value)?,
            // schedule / optimizer
            "epochs" => train.epochs = parse_scalar(key, value)?,
            "steps_per_epoch" => train.steps_per_epoch = parse_scalar(key, value)?,
            "batch_size" => train.batch_size = parse_scalar(key, value)?,
            "lr_init" => train.lr_init = parse_scalar(key, value)?,
            "lr_final" => train.lr_final = parse_scalar(key, value)?,
            "beta1" => train.beta1 = parse_scalar(key, value)?,
            "beta2" => train.beta2 = parse_scalar(key, value)?,
            "adam_eps" => train.adam_eps = parse_scalar(key, value)?,
            "weight_decay" => train.weight_decay = parse_scalar(key, value)?,
            "charbonnier_eps" => train.charbonnier_eps = parse_scalar(key, value)?,
            "crop_size" => train.crop_size = parse_scalar(key, value)?,
            "seed" => train.seed = parse_scalar(key, value)?,
            "dose_fraction" => train.dose_fraction = parse_scalar(key, value)?,
            "dose_scale" => train.dose_scale = parse_scalar(key, value)?,
            "train_phantoms" => train.train_phantoms = parse_scalar(key, value)?,
            "val_phantoms" => train.val_phantoms = parse_scalar(key, value)?,
            "checkpoint_every" => train.checkpoint_every = parse_scalar(key, value)?,
            "out_dir" => train.out_dir = PathBuf::from(value),
            "resume" => train.resume = Some(PathBuf::from(value)),
            // phantom recipe
            "phantom_dims" => train.phantom.dims = parse_list(key, value)?,
            "voxel_size_mm" => train.phantom.voxel_size = parse_list(key, value)?,
            "background" => train.phantom.background = parse_scalar(key, value)?,
            "organ_count" => train.phantom.organ_count = parse_scalar(key, value)?,
            "organ_intensity" => train.phantom.organ_intensity = parse_pair(key, value)?,
            "tumor_count" => train.phantom.tumor_count = parse_scalar(key, value)?,
            "tumor_radius_mm" => train.phantom.tumor_radius_mm = parse_pair(key, value)?,
            "tumor_contrast" => train.phantom.tumor_contrast = parse_pair(key, value)?,
            "smooth_sigma_mm" => train.phantom.smooth_sigma_mm = parse_scalar(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
    }
    Ok((train, model))
}

pub fn parse_config_file(path: &Path) -> Result<(TrainConfig, ModelConfig), ConfigError> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_blanks() {
        let text = "\
# smoke run
channels = 6
epochs=2
steps_per_epoch = 100   # inline comment
crop_size=16
phantom_dims = 24,24,24
tumor_contrast = 2.0, 4.0
use_gcfn = false
out_dir = /tmp/run
";
        let (train, model) = parse_config(text).unwrap();
        assert_eq!(model.base_channels, 6);
        assert_eq!(model.embed_dim, 24);
        assert!(!model.use_gcfn);
        assert_eq!(train.epochs, 2);
        assert_eq!(train.steps_per_epoch, 100);
        assert_eq!(train.phantom.dims, [24, 24, 24]);
        assert_eq!(train.phantom.tumor_contrast, (2.0, 4.0));
        assert_eq!(train.out_dir, PathBuf::from("/tmp/run"));
    }

    #[test]
    fn unknown_key_is_an_error() {
        match parse_config("chanels = 6") {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "chanels"),
            other => panic!("expected unknown key error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(matches!(parse_config("epochs"), Err(ConfigError::BadLine { line: 1, .. })));
    }

    #[test]
    fn embed_dim_tracks_channels_unless_overridden() {
        let (_, m) = parse_config("channels = 8").unwrap();
        assert_eq!(m.embed_dim, 32);
        let (_, m) = parse_config("embed_dim = 20\nchannels = 8").unwrap();
        assert_eq!(m.embed_dim, 20);
    }
}
