//! Multi-Dconv head transposed attention: self-attention over the channel
//! axis of a feature map, giving a Ĉ×Ĉ attention map whose cost is linear
//! in voxel count.

use crate::tensor::{ConvSpec, Scalar, Tensor};

/// Parameters of one MDTA layer over a `[C, D, H, W]` feature map.
#[derive(Clone)]
pub struct MdtaParams<T: Scalar> {
    pub norm_scale: Tensor<T>,
    pub norm_bias: Tensor<T>,
    /// 1×1×1 conv `C -> 3C` producing stacked query/key/value channels.
    pub point_qkv_w: Tensor<T>,
    pub point_qkv_b: Tensor<T>,
    /// 3×3×3 depthwise conv over the 3C stacked channels.
    pub depth_qkv_w: Tensor<T>,
    pub depth_qkv_b: Tensor<T>,
    /// Learnable per-head scaling of the channel dot products; the logits
    /// are divided by it. Initialized to 1, positive at init.
    pub temperature: Tensor<T>,
    /// Output 1×1×1 conv `C -> C`.
    pub point_out_w: Tensor<T>,
    pub point_out_b: Tensor<T>,
    pub heads: usize,
    pub ln_eps: f64,
}

fn dims4<T: Scalar>(t: &Tensor<T>) -> [usize; 4] {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected [C, D, H, W], got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

/// Layer norm across the channel axis of a channel-first feature map.
pub fn channel_layer_norm<T: Scalar>(
    f: &Tensor<T>,
    scale: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    assert_eq!(f.rank(), 4, "channel_layer_norm expects [C, D, H, W]");
    f.permute(&[1, 2, 3, 0]).layer_norm(scale, bias, T::from_f64(eps)).permute(&[3, 0, 1, 2])
}

/// Channel-wise transposed attention with residual:
/// normalize, project to Q/K/V via pointwise + depthwise convs, attend over
/// channels per head, project back, add the input.
pub fn mdta<T: Scalar>(f: &Tensor<T>, p: &MdtaParams<T>) -> Tensor<T> {
    let [c, d, h, w] = dims4(f);
    assert_eq!(p.norm_scale.shape(), &[c], "channel count mismatch");
    let heads = p.heads;
    assert!(heads >= 1 && c % heads == 0, "heads {heads} must divide channels {c}");
    let ch = c / heads;
    let vox = d * h * w;

    let y = channel_layer_norm(f, &p.norm_scale, &p.norm_bias, p.ln_eps);
    let qkv = y
        .reshape(&[1, c, d, h, w])
        .conv3d(&p.point_qkv_w, Some(&p.point_qkv_b), &ConvSpec::pointwise())
        .conv3d(&p.depth_qkv_w, Some(&p.depth_qkv_b), &ConvSpec::depthwise(3, 3 * c));

    let qkv = qkv.reshape(&[3, heads, ch, vox]);
    let q = qkv.slice(&[0..1, 0..heads, 0..ch, 0..vox]).reshape(&[heads, ch, vox]);
    let k = qkv.slice(&[1..2, 0..heads, 0..ch, 0..vox]).reshape(&[heads, ch, vox]);
    let v = qkv.slice(&[2..3, 0..heads, 0..ch, 0..vox]).reshape(&[heads, ch, vox]);

    // channel x channel map per head; never materializes anything of size vox².
    let logits = q.matmul(&k.transpose_last()).div(&p.temperature.reshape(&[heads, 1, 1]));
    let attn = logits.softmax(2);
    let ctx = attn.matmul(&v); // [heads, ch, vox]

    let out = ctx
        .reshape(&[1, c, d, h, w])
        .conv3d(&p.point_out_w, Some(&p.point_out_b), &ConvSpec::pointwise())
        .reshape(&[c, d, h, w]);
    out.add(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(c: usize, heads: usize, rng: &mut ChaCha8Rng) -> MdtaParams<f64> {
        let mut t = |shape: &[usize], lo: f64, hi: f64| {
            let n: usize = shape.iter().product();
            Tensor::new((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape)
        };
        MdtaParams {
            norm_scale: Tensor::full(&[c], 1.0),
            norm_bias: Tensor::zeros(&[c]),
            point_qkv_w: t(&[3 * c, c, 1, 1, 1], -0.4, 0.4),
            point_qkv_b: Tensor::zeros(&[3 * c]),
            depth_qkv_w: t(&[3 * c, 1, 3, 3, 3], -0.4, 0.4),
            depth_qkv_b: Tensor::zeros(&[3 * c]),
            temperature: Tensor::full(&[heads], 1.0),
            point_out_w: t(&[c, c, 1, 1, 1], -0.4, 0.4),
            point_out_b: Tensor::zeros(&[c]),
            heads,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn zero_input_zero_biases_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = params(4, 2, &mut rng);
        let f = Tensor::zeros(&[4, 2, 2, 2]);
        let y = mdta(&f, &p);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_channel_per_head_reduces_to_projected_value() {
        // C == heads: each attention map is the 1x1 matrix [1], so the
        // output is point_out(V) + F.
        let c = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = params(c, c, &mut rng);
        let n = c * 8;
        let f = Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), &[c, 2, 2, 2]);

        let y = mdta(&f, &p);

        // independently: v channels, then pointwise out conv, then residual
        let ycn = channel_layer_norm(&f, &p.norm_scale, &p.norm_bias, p.ln_eps);
        let qkv = ycn
            .reshape(&[1, c, 2, 2, 2])
            .conv3d(&p.point_qkv_w, Some(&p.point_qkv_b), &ConvSpec::pointwise())
            .conv3d(&p.depth_qkv_w, Some(&p.depth_qkv_b), &ConvSpec::depthwise(3, 3 * c));
        let v = qkv.reshape(&[3, c, 8]).slice(&[2..3, 0..c, 0..8]).reshape(&[1, c, 2, 2, 2]);
        let expect = v
            .conv3d(&p.point_out_w, Some(&p.point_out_b), &ConvSpec::pointwise())
            .reshape(&[c, 2, 2, 2])
            .add(&f);
        for (a, b) in y.data().iter().zip(expect.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        // recompute the attention map the same way mdta does and check rows
        let c = 6;
        let heads = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = params(c, heads, &mut rng);
        let f =
            Tensor::new((0..c * 27).map(|_| rng.random_range(-1.0..1.0)).collect(), &[c, 3, 3, 3]);
        let y = channel_layer_norm(&f, &p.norm_scale, &p.norm_bias, p.ln_eps);
        let qkv = y
            .reshape(&[1, c, 3, 3, 3])
            .conv3d(&p.point_qkv_w, Some(&p.point_qkv_b), &ConvSpec::pointwise())
            .conv3d(&p.depth_qkv_w, Some(&p.depth_qkv_b), &ConvSpec::depthwise(3, 3 * c))
            .reshape(&[3, heads, c / heads, 27]);
        let q = qkv.slice(&[0..1, 0..heads, 0..c / heads, 0..27]).reshape(&[heads, c / heads, 27]);
        let k = qkv.slice(&[1..2, 0..heads, 0..c / heads, 0..27]).reshape(&[heads, c / heads, 27]);
        let attn =
            q.matmul(&k.transpose_last()).div(&p.temperature.reshape(&[heads, 1, 1])).softmax(2);
        let ch = c / heads;
        for hh in 0..heads {
            for i in 0..ch {
                let row = &attn.data()[(hh * ch + i) * ch..(hh * ch + i + 1) * ch];
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
