//! Spatial-wise transformer block (window attention + MLP recurrence),
//! patch embedding and patch merging for the token-grid path.

use crate::attention::{shifted_window_msa, WindowAttnParams, WindowSpec};
use crate::tensor::{PadMode, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone)]
pub struct LayerNormParams<T: Scalar> {
    pub scale: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(dim: usize) -> Self {
        LayerNormParams { scale: Tensor::full(&[dim], T::ONE), bias: Tensor::zeros(&[dim]) }
    }
}

#[derive(Clone)]
pub struct MlpParams<T: Scalar> {
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

/// One spatial block: LN → W-MSA → LN → MLP → LN → SW-MSA → LN → MLP, each
/// sub-layer wrapped in a residual.
#[derive(Clone)]
pub struct SpatialBlockParams<T: Scalar> {
    pub norm1: LayerNormParams<T>,
    pub attn_w: WindowAttnParams<T>,
    pub norm2: LayerNormParams<T>,
    pub mlp1: MlpParams<T>,
    pub norm3: LayerNormParams<T>,
    pub attn_sw: WindowAttnParams<T>,
    pub norm4: LayerNormParams<T>,
    pub mlp2: MlpParams<T>,
}

pub(crate) fn normal_tensor<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    sigma: f64,
) -> Tensor<T> {
    let dist = Normal::new(0.0, sigma).expect("valid sigma");
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| T::from_f64(dist.sample(rng))).collect(), shape)
}

impl<T: Scalar> WindowAttnParams<T> {
    pub fn init(dim: usize, heads: usize, window: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % heads == 0, "heads {heads} must divide dim {dim}");
        let table = (2 * window - 1).pow(3);
        WindowAttnParams {
            query: normal_tensor(rng, &[dim, dim], 0.02),
            key: normal_tensor(rng, &[dim, dim], 0.02),
            value: normal_tensor(rng, &[dim, dim], 0.02),
            out: normal_tensor(rng, &[dim, dim], 0.02),
            bias_table: normal_tensor(rng, &[heads, table], 0.02),
            heads,
        }
    }
}

impl<T: Scalar> SpatialBlockParams<T> {
    pub fn init(
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        let mlp = |rng: &mut ChaCha8Rng| MlpParams {
            fc1_w: normal_tensor(rng, &[dim, hidden], 0.02),
            fc1_b: Tensor::zeros(&[hidden]),
            fc2_w: normal_tensor(rng, &[hidden, dim], 0.02),
            fc2_b: Tensor::zeros(&[dim]),
        };
        SpatialBlockParams {
            norm1: LayerNormParams::identity(dim),
            attn_w: WindowAttnParams::init(dim, heads, window, rng),
            norm2: LayerNormParams::identity(dim),
            mlp1: mlp(rng),
            norm3: LayerNormParams::identity(dim),
            attn_sw: WindowAttnParams::init(dim, heads, window, rng),
            norm4: LayerNormParams::identity(dim),
            mlp2: mlp(rng),
        }
    }

    /// Canonical flattening order, matched by [`Self::from_tensors`].
    pub fn tensors(&self) -> Vec<Tensor<T>> {
        let mut v = Vec::with_capacity(26);
        for (norm, attn) in [(&self.norm1, &self.attn_w), (&self.norm3, &self.attn_sw)] {
            v.push(norm.scale.clone());
            v.push(norm.bias.clone());
            v.push(attn.query.clone());
            v.push(attn.key.clone());
            v.push(attn.value.clone());
            v.push(attn.out.clone());
            v.push(attn.bias_table.clone());
        }
        for (norm, mlp) in [(&self.norm2, &self.mlp1), (&self.norm4, &self.mlp2)] {
            v.push(norm.scale.clone());
            v.push(norm.bias.clone());
            v.push(mlp.fc1_w.clone());
            v.push(mlp.fc1_b.clone());
            v.push(mlp.fc2_w.clone());
            v.push(mlp.fc2_b.clone());
        }
        v
    }

    pub fn from_tensors(t: &[Tensor<T>], _dim: usize, heads: usize, _window: usize) -> Self {
        assert_eq!(t.len(), 26, "spatial block expects 26 parameter tensors");
        let attn = |o: usize| WindowAttnParams {
            query: t[o].clone(),
            key: t[o + 1].clone(),
            value: t[o + 2].clone(),
            out: t[o + 3].clone(),
            bias_table: t[o + 4].clone(),
            heads,
        };
        let norm = |o: usize| LayerNormParams { scale: t[o].clone(), bias: t[o + 1].clone() };
        let mlp = |o: usize| MlpParams {
            fc1_w: t[o].clone(),
            fc1_b: t[o + 1].clone(),
            fc2_w: t[o + 2].clone(),
            fc2_b: t[o + 3].clone(),
        };
        SpatialBlockParams {
            norm1: norm(0),
            attn_w: attn(2),
            norm3: norm(7),
            attn_sw: attn(9),
            norm2: norm(14),
            mlp1: mlp(16),
            norm4: norm(20),
            mlp2: mlp(22),
        }
    }
}

fn mlp<T: Scalar>(x: &Tensor<T>, p: &MlpParams<T>) -> Tensor<T> {
    x.matmul(&p.fc1_w).add(&p.fc1_b).gelu().matmul(&p.fc2_w).add(&p.fc2_b)
}

fn ln<T: Scalar>(x: &Tensor<T>, p: &LayerNormParams<T>, eps: f64) -> Tensor<T> {
    x.layer_norm(&p.scale, &p.bias, T::from_f64(eps))
}

/// The four-line block recurrence over a token grid `[gz, gy, gx, d]`.
/// Grids that are not divisible by the window are reflection-padded on the
/// high side and cropped on exit.
pub fn spatial_block<T: Scalar>(
    z: &Tensor<T>,
    p: &SpatialBlockParams<T>,
    window: usize,
    ln_eps: f64,
) -> Tensor<T> {
    assert_eq!(z.rank(), 4, "spatial_block expects [gz, gy, gx, d], got {:?}", z.shape());
    let orig = [z.shape()[0], z.shape()[1], z.shape()[2]];
    let pads: Vec<(usize, usize)> =
        orig.iter().map(|&g| (0, (window - g % window) % window)).chain([(0, 0)]).collect();
    let needs_pad = pads.iter().any(|&(_, a)| a > 0);
    let zp = if needs_pad { z.pad(&pads, PadMode::Reflect) } else { z.clone() };
    let grid = [zp.shape()[0], zp.shape()[1], zp.shape()[2]];

    let spec_w = WindowSpec::plain(grid, window);
    let spec_sw = WindowSpec::shifted(grid, window);

    let x1 = shifted_window_msa(&ln(&zp, &p.norm1, ln_eps), &p.attn_w, &spec_w).add(&zp);
    let x2 = mlp(&ln(&x1, &p.norm2, ln_eps), &p.mlp1).add(&x1);
    let x3 = shifted_window_msa(&ln(&x2, &p.norm3, ln_eps), &p.attn_sw, &spec_sw).add(&x2);
    let x4 = mlp(&ln(&x3, &p.norm4, ln_eps), &p.mlp2).add(&x3);

    if needs_pad {
        x4.slice(&[0..orig[0], 0..orig[1], 0..orig[2], 0..x4.shape()[3]])
    } else {
        x4
    }
}

/// Project non-overlapping P³ voxel patches (flattened z-major) to tokens:
/// `[1, D, H, W] -> [D/P, H/P, W/P, d]`.
pub fn patch_embed<T: Scalar>(x: &Tensor<T>, projection: &Tensor<T>, patch: usize) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "patch_embed expects [1, D, H, W], got {s:?}");
    assert_eq!(s[0], 1, "patch_embed expects a single-channel volume");
    let (d, h, w) = (s[1], s[2], s[3]);
    for (axis, &e) in [d, h, w].iter().enumerate() {
        assert!(e % patch == 0, "patch size {patch} does not divide axis {axis} extent {e}");
    }
    let p3 = patch * patch * patch;
    assert_eq!(
        projection.shape()[0],
        p3,
        "projection expects {p3} rows, got {:?}",
        projection.shape()
    );
    let (td, th, tw) = (d / patch, h / patch, w / patch);
    x.reshape(&[td, patch, th, patch, tw, patch])
        .permute(&[0, 2, 4, 1, 3, 5])
        .reshape(&[td, th, tw, p3])
        .matmul(projection)
}

/// Concatenate each 2³ token neighborhood (z-major) and project `8d -> 2d`,
/// halving every grid extent.
pub fn patch_merge<T: Scalar>(z: &Tensor<T>, projection: &Tensor<T>) -> Tensor<T> {
    let s = z.shape();
    assert_eq!(s.len(), 4, "patch_merge expects [gz, gy, gx, d], got {s:?}");
    let (gz, gy, gx, d) = (s[0], s[1], s[2], s[3]);
    assert!(
        gz % 2 == 0 && gy % 2 == 0 && gx % 2 == 0,
        "patch_merge requires even token grid extents, got {:?}",
        &s[..3]
    );
    assert_eq!(
        projection.shape(),
        &[8 * d, 2 * d],
        "merge projection must be [8d, 2d], got {:?}",
        projection.shape()
    );
    z.reshape(&[gz / 2, 2, gy / 2, 2, gx / 2, 2, d])
        .permute(&[0, 2, 4, 1, 3, 5, 6])
        .reshape(&[gz / 2, gy / 2, gx / 2, 8 * d])
        .matmul(projection)
}
