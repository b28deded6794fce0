//! Full network assembly: 3×3×3 stem, four-level channel-wise encoder, a
//! two-level spatial token path fused into the latent, four-level decoder
//! with skip connections, refinement blocks and a zero-initialized residual
//! head, so a freshly built network is the identity denoiser.

pub(crate) mod weights_io;

pub use weights_io::{load_weights, save_weights, WeightsError};

use crate::blocks::{
    channel_block, downsample, patch_embed, patch_merge, spatial_block, upsample,
    ChannelBlockParams, FfnVariant, GatedFfnParams, LayerNormParams, MlpParams,
    SpatialBlockParams,
};
use crate::attention::{MdtaParams, WindowAttnParams};
use crate::tensor::{ConvSpec, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input must be [1, D, H, W], got {0:?}")]
    InputShape(Vec<usize>),
    #[error("input axis {axis} extent {extent} is not divisible by {required}")]
    Divisibility { axis: char, extent: usize, required: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unexpected parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

/// Architecture hyperparameters. Widths double per encoder level
/// (C, 2C, 4C, 8C at scales 1, 1/2, 1/4, 1/8); the spatial path embeds P³
/// patches at dimension `embed_dim` and reaches scale 1/8 after one merge.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub patch_size: usize,
    pub window: usize,
    pub embed_dim: usize,
    pub heads_spatial: [usize; 2],
    pub heads_channel: [usize; 4],
    pub enc_blocks: [usize; 4],
    pub dec_blocks: [usize; 4],
    pub refine_blocks: usize,
    pub spatial_blocks: [usize; 2],
    pub ffn_expansion: f64,
    pub mlp_ratio: f64,
    pub use_gcfn: bool,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Defaults scaled from a base channel count; the spatial embedding is
    /// 4C so the merged spatial latent (8C) matches the channel latent.
    pub fn with_channels(c: usize) -> Self {
        ModelConfig {
            base_channels: c,
            patch_size: 4,
            window: 2,
            embed_dim: 4 * c,
            heads_spatial: [2, 4],
            heads_channel: [1, 2, 4, 8],
            enc_blocks: [1, 1, 1, 1],
            dec_blocks: [1, 1, 1, 1],
            refine_blocks: 1,
            spatial_blocks: [1, 1],
            ffn_expansion: 2.0,
            mlp_ratio: 4.0,
            use_gcfn: true,
            ln_eps: 1e-5,
        }
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Every input extent must be divisible by this (three halvings on the
    /// channel path, one patch embed plus one merge on the spatial path).
    pub fn divisibility(&self) -> usize {
        lcm(8, 2 * self.patch_size)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.base_channels == 0 || self.patch_size == 0 || self.window == 0 {
            return err("base_channels, patch_size and window must be positive".into());
        }
        if self.embed_dim == 0 {
            return err("embed_dim must be positive".into());
        }
        for (l, &h) in self.heads_channel.iter().enumerate() {
            let w = self.level_width(l);
            if h == 0 || w % h != 0 {
                return err(format!("heads_channel[{l}]={h} must divide level width {w}"));
            }
        }
        let sp_dims = [self.embed_dim, 2 * self.embed_dim];
        for (l, (&h, &d)) in self.heads_spatial.iter().zip(sp_dims.iter()).enumerate() {
            if h == 0 || d % h != 0 {
                return err(format!("heads_spatial[{l}]={h} must divide token dim {d}"));
            }
        }
        if self.ffn_expansion <= 0.0 || self.mlp_ratio <= 0.0 {
            return err("expansion ratios must be positive".into());
        }
        if self.ln_eps <= 0.0 {
            return err("ln_eps must be positive".into());
        }
        Ok(())
    }

    fn ffn_width(&self, channels: usize) -> usize {
        ((channels as f64) * self.ffn_expansion).round().max(1.0) as usize
    }

    fn mlp_width(&self, dim: usize) -> usize {
        ((dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_channels(12)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
    One,
}

struct ParamDef {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// The single source of truth for every parameter the model owns, in build
/// order. `build`, `param_count` and the assembly all follow it.
fn inventory(config: &ModelConfig) -> Vec<ParamDef> {
    let mut defs: Vec<ParamDef> = Vec::new();
    let mut def = |name: String, shape: Vec<usize>, init: Init| {
        defs.push(ParamDef { name, shape, init });
    };
    let c = config.base_channels;

    def("stem.weight".into(), vec![c, 1, 3, 3, 3], Init::Normal);
    def("stem.bias".into(), vec![c], Init::Zero);

    let channel_block_defs =
        |def: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str, w: usize, heads: usize| {
            let e = config.ffn_width(w);
            def(format!("{prefix}.mdta.norm.scale"), vec![w], Init::One);
            def(format!("{prefix}.mdta.norm.bias"), vec![w], Init::Zero);
            def(format!("{prefix}.mdta.point_qkv.weight"), vec![3 * w, w, 1, 1, 1], Init::Normal);
            def(format!("{prefix}.mdta.point_qkv.bias"), vec![3 * w], Init::Zero);
            def(format!("{prefix}.mdta.depth_qkv.weight"), vec![3 * w, 1, 3, 3, 3], Init::Normal);
            def(format!("{prefix}.mdta.depth_qkv.bias"), vec![3 * w], Init::Zero);
            def(format!("{prefix}.mdta.temperature"), vec![heads], Init::One);
            def(format!("{prefix}.mdta.point_out.weight"), vec![w, w, 1, 1, 1], Init::Normal);
            def(format!("{prefix}.mdta.point_out.bias"), vec![w], Init::Zero);
            let mut ffn = |kind: &str, inner: Vec<usize>| {
                def(format!("{prefix}.{kind}.norm.scale"), vec![w], Init::One);
                def(format!("{prefix}.{kind}.norm.bias"), vec![w], Init::Zero);
                def(format!("{prefix}.{kind}.point_a.weight"), vec![e, w, 1, 1, 1], Init::Normal);
                def(format!("{prefix}.{kind}.point_a.bias"), vec![e], Init::Zero);
                def(format!("{prefix}.{kind}.point_b.weight"), vec![e, w, 1, 1, 1], Init::Normal);
                def(format!("{prefix}.{kind}.point_b.bias"), vec![e], Init::Zero);
                def(format!("{prefix}.{kind}.inner_a.weight"), inner.clone(), Init::Normal);
                def(format!("{prefix}.{kind}.inner_a.bias"), vec![e], Init::Zero);
                def(format!("{prefix}.{kind}.inner_b.weight"), inner, Init::Normal);
                def(format!("{prefix}.{kind}.inner_b.bias"), vec![e], Init::Zero);
                def(format!("{prefix}.{kind}.point_out.weight"), vec![w, e, 1, 1, 1], Init::Normal);
                def(format!("{prefix}.{kind}.point_out.bias"), vec![w], Init::Zero);
            };
            ffn("gdfn", vec![e, 1, 3, 3, 3]);
            if config.use_gcfn {
                ffn("gcfn", vec![e, e, 3, 3, 3]);
            }
        };

    let spatial_block_defs =
        |def: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str, d: usize, heads: usize| {
            let hidden = config.mlp_width(d);
            let table = (2 * config.window - 1).pow(3);
            for (norm, attn) in [("norm1", "wattn"), ("norm3", "swattn")] {
                def(format!("{prefix}.{norm}.scale"), vec![d], Init::One);
                def(format!("{prefix}.{norm}.bias"), vec![d], Init::Zero);
                def(format!("{prefix}.{attn}.query"), vec![d, d], Init::Normal);
                def(format!("{prefix}.{attn}.key"), vec![d, d], Init::Normal);
                def(format!("{prefix}.{attn}.value"), vec![d, d], Init::Normal);
                def(format!("{prefix}.{attn}.out"), vec![d, d], Init::Normal);
                def(format!("{prefix}.{attn}.bias_table"), vec![heads, table], Init::Normal);
            }
            for (norm, mlp) in [("norm2", "mlp1"), ("norm4", "mlp2")] {
                def(format!("{prefix}.{norm}.scale"), vec![d], Init::One);
                def(format!("{prefix}.{norm}.bias"), vec![d], Init::Zero);
                def(format!("{prefix}.{mlp}.fc1.weight"), vec![d, hidden], Init::Normal);
                def(format!("{prefix}.{mlp}.fc1.bias"), vec![hidden], Init::Zero);
                def(format!("{prefix}.{mlp}.fc2.weight"), vec![hidden, d], Init::Normal);
                def(format!("{prefix}.{mlp}.fc2.bias"), vec![d], Init::Zero);
            }
        };

    for l in 0..4 {
        let w = config.level_width(l);
        for b in 0..config.enc_blocks[l] {
            channel_block_defs(&mut def, &format!("enc{}.{b}", l + 1), w, config.heads_channel[l]);
        }
        if l < 3 {
            def(format!("down{}.weight", l + 1), vec![2 * w, w, 3, 3, 3], Init::Normal);
            def(format!("down{}.bias", l + 1), vec![2 * w], Init::Zero);
        }
    }

    let p3 = config.patch_size.pow(3);
    def("embed.weight".into(), vec![p3, config.embed_dim], Init::Normal);
    for b in 0..config.spatial_blocks[0] {
        spatial_block_defs(&mut def, &format!("sp1.{b}"), config.embed_dim, config.heads_spatial[0]);
    }
    def("merge.weight".into(), vec![8 * config.embed_dim, 2 * config.embed_dim], Init::Normal);
    for b in 0..config.spatial_blocks[1] {
        spatial_block_defs(
            &mut def,
            &format!("sp2.{b}"),
            2 * config.embed_dim,
            config.heads_spatial[1],
        );
    }

    let latent = config.level_width(3);
    let fused_in = latent + 2 * config.embed_dim;
    def("fuse.weight".into(), vec![latent, fused_in, 1, 1, 1], Init::Normal);
    def("fuse.bias".into(), vec![latent], Init::Zero);
    for b in 0..config.dec_blocks[3] {
        channel_block_defs(&mut def, &format!("dec4.{b}"), latent, config.heads_channel[3]);
    }

    for l in (1..=3).rev() {
        let w = config.level_width(l - 1);
        def(format!("up{l}.weight"), vec![w, 2 * w, 1, 1, 1], Init::Normal);
        def(format!("up{l}.bias"), vec![w], Init::Zero);
        def(format!("reduce{l}.weight"), vec![w, 2 * w, 1, 1, 1], Init::Normal);
        def(format!("reduce{l}.bias"), vec![w], Init::Zero);
        for b in 0..config.dec_blocks[l - 1] {
            channel_block_defs(
                &mut def,
                &format!("dec{l}.{b}"),
                w,
                config.heads_channel[l - 1],
            );
        }
    }

    for b in 0..config.refine_blocks {
        channel_block_defs(&mut def, &format!("refine.{b}"), c, config.heads_channel[0]);
    }

    // Zero-initialized residual head: the untrained network is the identity.
    def("head.weight".into(), vec![1, c, 3, 3, 3], Init::Zero);
    def("head.bias".into(), vec![1], Init::Zero);

    defs
}

/// Element count of every parameter `build` would create.
pub fn param_count(config: &ModelConfig) -> u64 {
    inventory(config).iter().map(|d| d.shape.iter().product::<usize>() as u64).sum()
}

#[derive(Clone, Debug)]
pub struct WeightEntry<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// Ordered named parameter tensors for the whole network, plus the config
/// that shaped them.
#[derive(Clone)]
pub struct ModelWeights<T: Scalar> {
    pub config: ModelConfig,
    entries: Vec<WeightEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn empty(config: ModelConfig) -> Self {
        ModelWeights { config, entries: Vec::new(), index: HashMap::new() }
    }

    pub fn push_entry(&mut self, name: String, shape: Vec<usize>, values: Vec<T>) {
        assert_eq!(values.len(), shape.iter().product::<usize>(), "entry {name} size mismatch");
        assert!(
            self.index.insert(name.clone(), self.entries.len()).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(WeightEntry { name, shape, values });
    }

    pub fn entry(&self, name: &str) -> Option<&WeightEntry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[WeightEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [WeightEntry<T>] {
        &mut self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn total_elements(&self) -> u64 {
        self.entries.iter().map(|e| e.values.len() as u64).sum()
    }

    /// Replace one entry with zero-mean normal draws (tests use this to make
    /// the zero-initialized head generic).
    pub fn randomize_entry(&mut self, name: &str, sigma: f64, rng: &mut ChaCha8Rng) {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no entry {name}"));
        let dist = Normal::new(0.0, sigma).expect("valid sigma");
        for v in self.entries[i].values.iter_mut() {
            *v = T::from_f64(dist.sample(rng));
        }
    }

    /// Leaf tensors for one forward/backward pass, in entry order.
    pub fn bind(&self, trainable: bool) -> Vec<(String, Tensor<T>)> {
        self.entries
            .iter()
            .map(|e| {
                let t = if trainable {
                    Tensor::param(e.values.clone(), &e.shape)
                } else {
                    Tensor::new(e.values.clone(), &e.shape)
                };
                (e.name.clone(), t)
            })
            .collect()
    }

    pub fn to_f32(&self) -> ModelWeights<f32> {
        let mut out = ModelWeights::empty(self.config.clone());
        for e in &self.entries {
            out.push_entry(
                e.name.clone(),
                e.shape.clone(),
                e.values.iter().map(|v| v.to_f64() as f32).collect(),
            );
        }
        out
    }
}

/// Deterministic initialization: convolutions and projections from
/// normal(0, 0.02), norm scales 1 / biases 0, temperatures 1, and a zero
/// residual head.
pub fn build<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelWeights<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 0.02).expect("valid sigma");
    let mut weights = ModelWeights::empty(config.clone());
    for def in inventory(config) {
        let n: usize = def.shape.iter().product();
        let values: Vec<T> = match def.init {
            Init::Normal => (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect(),
            Init::Zero => vec![T::ZERO; n],
            Init::One => vec![T::ONE; n],
        };
        weights.push_entry(def.name, def.shape, values);
    }
    Ok(weights)
}

struct Store<T: Scalar> {
    map: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Store<T> {
    fn take(&mut self, name: String) -> Tensor<T> {
        // validated against the inventory before assembly starts
        self.map.remove(&name).unwrap_or_else(|| panic!("parameter {name} vanished"))
    }
}

/// The assembled network: block parameter structs holding tensor handles.
pub struct SpachModel<T: Scalar> {
    pub config: ModelConfig,
    stem_w: Tensor<T>,
    stem_b: Tensor<T>,
    enc: Vec<Vec<ChannelBlockParams<T>>>,
    down: Vec<(Tensor<T>, Tensor<T>)>,
    embed: Tensor<T>,
    sp1: Vec<SpatialBlockParams<T>>,
    merge: Tensor<T>,
    sp2: Vec<SpatialBlockParams<T>>,
    fuse_w: Tensor<T>,
    fuse_b: Tensor<T>,
    dec4: Vec<ChannelBlockParams<T>>,
    up: Vec<(Tensor<T>, Tensor<T>)>,
    reduce: Vec<(Tensor<T>, Tensor<T>)>,
    dec: Vec<Vec<ChannelBlockParams<T>>>,
    refine: Vec<ChannelBlockParams<T>>,
    head_w: Tensor<T>,
    head_b: Tensor<T>,
}

impl<T: Scalar> SpachModel<T> {
    /// Assemble from named tensors; the name/shape set must match the
    /// config's inventory exactly.
    pub fn from_weights_tensors(
        config: &ModelConfig,
        named: Vec<(String, Tensor<T>)>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut map: HashMap<String, Tensor<T>> = HashMap::new();
        for (name, t) in named {
            if map.insert(name.clone(), t).is_some() {
                return Err(ModelError::UnknownParam(format!("{name} (duplicate)")));
            }
        }
        let defs = inventory(config);
        for def in &defs {
            match map.get(&def.name) {
                None => return Err(ModelError::MissingParam(def.name.clone())),
                Some(t) if t.shape() != def.shape.as_slice() => {
                    return Err(ModelError::ShapeMismatch {
                        name: def.name.clone(),
                        expected: def.shape.clone(),
                        found: t.shape().to_vec(),
                    });
                }
                Some(_) => {}
            }
        }
        if map.len() != defs.len() {
            let known: std::collections::HashSet<&str> =
                defs.iter().map(|d| d.name.as_str()).collect();
            let extra = map.keys().find(|k| !known.contains(k.as_str())).cloned();
            return Err(ModelError::UnknownParam(extra.unwrap_or_default()));
        }

        let mut store = Store { map };
        let eps = config.ln_eps;

        let channel_blocks = |store: &mut Store<T>, prefix: &str, count: usize, heads: usize| {
            (0..count)
                .map(|b| {
                    let p = format!("{prefix}.{b}");
                    let mdta = MdtaParams {
                        norm_scale: store.take(format!("{p}.mdta.norm.scale")),
                        norm_bias: store.take(format!("{p}.mdta.norm.bias")),
                        point_qkv_w: store.take(format!("{p}.mdta.point_qkv.weight")),
                        point_qkv_b: store.take(format!("{p}.mdta.point_qkv.bias")),
                        depth_qkv_w: store.take(format!("{p}.mdta.depth_qkv.weight")),
                        depth_qkv_b: store.take(format!("{p}.mdta.depth_qkv.bias")),
                        temperature: store.take(format!("{p}.mdta.temperature")),
                        point_out_w: store.take(format!("{p}.mdta.point_out.weight")),
                        point_out_b: store.take(format!("{p}.mdta.point_out.bias")),
                        heads,
                        ln_eps: eps,
                    };
                    let ffn = |store: &mut Store<T>, kind: &str, variant: FfnVariant| {
                        GatedFfnParams {
                            norm_scale: store.take(format!("{p}.{kind}.norm.scale")),
                            norm_bias: store.take(format!("{p}.{kind}.norm.bias")),
                            point_a_w: store.take(format!("{p}.{kind}.point_a.weight")),
                            point_a_b: store.take(format!("{p}.{kind}.point_a.bias")),
                            point_b_w: store.take(format!("{p}.{kind}.point_b.weight")),
                            point_b_b: store.take(format!("{p}.{kind}.point_b.bias")),
                            inner_a_w: store.take(format!("{p}.{kind}.inner_a.weight")),
                            inner_a_b: store.take(format!("{p}.{kind}.inner_a.bias")),
                            inner_b_w: store.take(format!("{p}.{kind}.inner_b.weight")),
                            inner_b_b: store.take(format!("{p}.{kind}.inner_b.bias")),
                            point_out_w: store.take(format!("{p}.{kind}.point_out.weight")),
                            point_out_b: store.take(format!("{p}.{kind}.point_out.bias")),
                            variant,
                            ln_eps: eps,
                        }
                    };
                    let gdfn = ffn(store, "gdfn", FfnVariant::Gdfn);
                    let gcfn = config.use_gcfn.then(|| ffn(store, "gcfn", FfnVariant::Gcfn));
                    ChannelBlockParams { mdta, gdfn, gcfn }
                })
                .collect::<Vec<_>>()
        };

        let spatial_blocks = |store: &mut Store<T>, prefix: &str, count: usize, heads: usize| {
            (0..count)
                .map(|b| {
                    let p = format!("{prefix}.{b}");
                    let norm = |store: &mut Store<T>, n: &str| LayerNormParams {
                        scale: store.take(format!("{p}.{n}.scale")),
                        bias: store.take(format!("{p}.{n}.bias")),
                    };
                    let attn = |store: &mut Store<T>, a: &str| WindowAttnParams {
                        query: store.take(format!("{p}.{a}.query")),
                        key: store.take(format!("{p}.{a}.key")),
                        value: store.take(format!("{p}.{a}.value")),
                        out: store.take(format!("{p}.{a}.out")),
                        bias_table: store.take(format!("{p}.{a}.bias_table")),
                        heads,
                    };
                    let mlp = |store: &mut Store<T>, m: &str| MlpParams {
                        fc1_w: store.take(format!("{p}.{m}.fc1.weight")),
                        fc1_b: store.take(format!("{p}.{m}.fc1.bias")),
                        fc2_w: store.take(format!("{p}.{m}.fc2.weight")),
                        fc2_b: store.take(format!("{p}.{m}.fc2.bias")),
                    };
                    SpatialBlockParams {
                        norm1: norm(store, "norm1"),
                        attn_w: attn(store, "wattn"),
                        norm2: norm(store, "norm2"),
                        mlp1: mlp(store, "mlp1"),
                        norm3: norm(store, "norm3"),
                        attn_sw: attn(store, "swattn"),
                        norm4: norm(store, "norm4"),
                        mlp2: mlp(store, "mlp2"),
                    }
                })
                .collect::<Vec<_>>()
        };

        let stem_w = store.take("stem.weight".into());
        let stem_b = store.take("stem.bias".into());
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..4 {
            enc.push(channel_blocks(
                &mut store,
                &format!("enc{}", l + 1),
                config.enc_blocks[l],
                config.heads_channel[l],
            ));
            if l < 3 {
                down.push((
                    store.take(format!("down{}.weight", l + 1)),
                    store.take(format!("down{}.bias", l + 1)),
                ));
            }
        }
        let embed = store.take("embed.weight".into());
        let sp1 = spatial_blocks(&mut store, "sp1", config.spatial_blocks[0], config.heads_spatial[0]);
        let merge = store.take("merge.weight".into());
        let sp2 = spatial_blocks(&mut store, "sp2", config.spatial_blocks[1], config.heads_spatial[1]);
        let fuse_w = store.take("fuse.weight".into());
        let fuse_b = store.take("fuse.bias".into());
        let dec4 = channel_blocks(&mut store, "dec4", config.dec_blocks[3], config.heads_channel[3]);
        let mut up = Vec::new();
        let mut reduce = Vec::new();
        let mut dec = Vec::new();
        for l in (1..=3).rev() {
            up.push((store.take(format!("up{l}.weight")), store.take(format!("up{l}.bias"))));
            reduce.push((
                store.take(format!("reduce{l}.weight")),
                store.take(format!("reduce{l}.bias")),
            ));
            dec.push(channel_blocks(
                &mut store,
                &format!("dec{l}"),
                config.dec_blocks[l - 1],
                config.heads_channel[l - 1],
            ));
        }
        let refine = channel_blocks(&mut store, "refine", config.refine_blocks, config.heads_channel[0]);
        let head_w = store.take("head.weight".into());
        let head_b = store.take("head.bias".into());
        debug_assert!(store.map.is_empty());

        Ok(SpachModel {
            config: config.clone(),
            stem_w,
            stem_b,
            enc,
            down,
            embed,
            sp1,
            merge,
            sp2,
            fuse_w,
            fuse_b,
            dec4,
            up,
            reduce,
            dec,
            refine,
            head_w,
            head_b,
        })
    }

    /// Assemble from stored weights; returns the model plus the leaf tensors
    /// in entry order (for reading gradients back out after `backward`).
    pub fn from_weights(
        weights: &ModelWeights<T>,
        trainable: bool,
    ) -> Result<(Self, Vec<Tensor<T>>), ModelError> {
        let named = weights.bind(trainable);
        let leaves: Vec<Tensor<T>> = named.iter().map(|(_, t)| t.clone()).collect();
        let model = Self::from_weights_tensors(&weights.config, named)?;
        Ok((model, leaves))
    }

    fn conv4(
        f: &Tensor<T>,
        w: &Tensor<T>,
        b: &Tensor<T>,
        spec: &ConvSpec,
    ) -> Tensor<T> {
        let s = f.shape();
        let out = f
            .reshape(&[1, s[0], s[1], s[2], s[3]])
            .conv3d(w, Some(b), spec);
        let os = out.shape().to_vec();
        out.reshape(&[os[1], os[2], os[3], os[4]])
    }

    /// Denoise one volume: `[1, D, H, W] -> [1, D, H, W]`, output is the
    /// predicted residual added to the input.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let s = x.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(ModelError::InputShape(s.to_vec()));
        }
        let req = self.config.divisibility();
        for (&extent, axis) in s[1..].iter().zip(['D', 'H', 'W']) {
            if extent == 0 || extent % req != 0 {
                return Err(ModelError::Divisibility { axis, extent, required: req });
            }
        }
        // token grids must be reflection-padddable to a window multiple at
        // both spatial levels
        let (mw, ps) = (self.config.window, self.config.patch_size);
        for (&extent, axis) in s[1..].iter().zip(['D', 'H', 'W']) {
            for grid in [extent / ps, extent / (2 * ps)] {
                let rem = grid % mw;
                if rem != 0 && (mw - rem) > grid - 1 {
                    return Err(ModelError::Divisibility {
                        axis,
                        extent,
                        required: 2 * ps * mw,
                    });
                }
            }
        }
        let (d, h, w) = (s[1], s[2], s[3]);
        let c = self.config.base_channels;
        let eps = self.config.ln_eps;
        let m = self.config.window;

        let x5 = x.reshape(&[1, 1, d, h, w]);
        let f0 = x5.conv3d(&self.stem_w, Some(&self.stem_b), &ConvSpec::same(3)).reshape(&[
            c, d, h, w,
        ]);

        // channel-wise encoder with skips at scales 1, 1/2, 1/4
        let mut feat = f0;
        let mut skips: Vec<Tensor<T>> = Vec::new();
        for l in 0..4 {
            for block in &self.enc[l] {
                feat = channel_block(&feat, block);
            }
            if l < 3 {
                skips.push(feat.clone());
                feat = downsample(&feat, &self.down[l].0, &self.down[l].1);
            }
        }
        let channel_latent = feat; // [8C, D/8, H/8, W/8]

        // spatial token path: embed at 1/P, merge to 1/(2P)
        let mut tokens = patch_embed(x, &self.embed, self.config.patch_size);
        for block in &self.sp1 {
            tokens = spatial_block(&tokens, block, m, eps);
        }
        tokens = patch_merge(&tokens, &self.merge);
        for block in &self.sp2 {
            tokens = spatial_block(&tokens, block, m, eps);
        }
        let spatial_latent = tokens.permute(&[3, 0, 1, 2]);
        assert_eq!(
            &spatial_latent.shape()[1..],
            &channel_latent.shape()[1..],
            "latent scales misaligned"
        );

        let latent = Tensor::concat(&[&channel_latent, &spatial_latent], 0);
        let mut cur = Self::conv4(&latent, &self.fuse_w, &self.fuse_b, &ConvSpec::pointwise());
        for block in &self.dec4 {
            cur = channel_block(&cur, block);
        }

        // decoder levels 3, 2, 1: upsample, fuse skip, halve channels
        for (i, l) in (1..=3).rev().enumerate() {
            cur = upsample(&cur, &self.up[i].0, &self.up[i].1);
            let skip = &skips[l - 1];
            let cat = Tensor::concat(&[&cur, skip], 0);
            cur = Self::conv4(&cat, &self.reduce[i].0, &self.reduce[i].1, &ConvSpec::pointwise());
            for block in &self.dec[i] {
                cur = channel_block(&cur, block);
            }
        }

        for block in &self.refine {
            cur = channel_block(&cur, block);
        }

        let residual = Self::conv4(&cur, &self.head_w, &self.head_b, &ConvSpec::same(3));
        Ok(residual.add(x))
    }
}
