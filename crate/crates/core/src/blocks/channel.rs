//! Channel-wise transformer block: transposed channel attention followed by
//! the two gated feed-forward variants, each under a residual.

use crate::attention::{channel_layer_norm, mdta, MdtaParams};
use crate::blocks::spatial::normal_tensor;
use crate::tensor::{ConvSpec, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

/// Which inner 3×3×3 convolution the gated feed-forward uses: depthwise
/// (channel-wise) for GDFN, dense spatial for GCFN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnVariant {
    Gdfn,
    Gcfn,
}

/// Two-branch gated feed-forward over a `[C, D, H, W]` feature map. Both
/// branches expand to the same inner width; the GELU branch gates the other
/// elementwise.
#[derive(Clone)]
pub struct GatedFfnParams<T: Scalar> {
    pub norm_scale: Tensor<T>,
    pub norm_bias: Tensor<T>,
    pub point_a_w: Tensor<T>,
    pub point_a_b: Tensor<T>,
    pub point_b_w: Tensor<T>,
    pub point_b_b: Tensor<T>,
    pub inner_a_w: Tensor<T>,
    pub inner_a_b: Tensor<T>,
    pub inner_b_w: Tensor<T>,
    pub inner_b_b: Tensor<T>,
    pub point_out_w: Tensor<T>,
    pub point_out_b: Tensor<T>,
    pub variant: FfnVariant,
    pub ln_eps: f64,
}

impl<T: Scalar> GatedFfnParams<T> {
    pub fn inner_width(&self) -> usize {
        self.point_a_w.shape()[0]
    }

    pub fn init(
        channels: usize,
        expansion: f64,
        variant: FfnVariant,
        ln_eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let e = ((channels as f64) * expansion).round().max(1.0) as usize;
        let inner_shape = match variant {
            FfnVariant::Gdfn => vec![e, 1, 3, 3, 3],
            FfnVariant::Gcfn => vec![e, e, 3, 3, 3],
        };
        GatedFfnParams {
            norm_scale: Tensor::full(&[channels], T::ONE),
            norm_bias: Tensor::zeros(&[channels]),
            point_a_w: normal_tensor(rng, &[e, channels, 1, 1, 1], 0.02),
            point_a_b: Tensor::zeros(&[e]),
            point_b_w: normal_tensor(rng, &[e, channels, 1, 1, 1], 0.02),
            point_b_b: Tensor::zeros(&[e]),
            inner_a_w: normal_tensor(rng, &inner_shape, 0.02),
            inner_a_b: Tensor::zeros(&[e]),
            inner_b_w: normal_tensor(rng, &inner_shape, 0.02),
            inner_b_b: Tensor::zeros(&[e]),
            point_out_w: normal_tensor(rng, &[channels, e, 1, 1, 1], 0.02),
            point_out_b: Tensor::zeros(&[channels]),
            variant,
            ln_eps,
        }
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        vec![
            self.norm_scale.clone(),
            self.norm_bias.clone(),
            self.point_a_w.clone(),
            self.point_a_b.clone(),
            self.point_b_w.clone(),
            self.point_b_b.clone(),
            self.inner_a_w.clone(),
            self.inner_a_b.clone(),
            self.inner_b_w.clone(),
            self.inner_b_b.clone(),
            self.point_out_w.clone(),
            self.point_out_b.clone(),
        ]
    }

    pub fn from_tensors(t: &[Tensor<T>], ln_eps: f64) -> Self {
        assert_eq!(t.len(), 12, "gated ffn expects 12 parameter tensors");
        let variant =
            if t[6].shape()[1] == 1 { FfnVariant::Gdfn } else { FfnVariant::Gcfn };
        GatedFfnParams {
            norm_scale: t[0].clone(),
            norm_bias: t[1].clone(),
            point_a_w: t[2].clone(),
            point_a_b: t[3].clone(),
            point_b_w: t[4].clone(),
            point_b_b: t[5].clone(),
            inner_a_w: t[6].clone(),
            inner_a_b: t[7].clone(),
            inner_b_w: t[8].clone(),
            inner_b_b: t[9].clone(),
            point_out_w: t[10].clone(),
            point_out_b: t[11].clone(),
            variant,
            ln_eps,
        }
    }
}

/// `point_out(GELU(inner_a(point_a(LN(F)))) ⊙ inner_b(point_b(LN(F)))) + F`
pub fn gated_ffn<T: Scalar>(f: &Tensor<T>, p: &GatedFfnParams<T>) -> Tensor<T> {
    let s = f.shape();
    assert_eq!(s.len(), 4, "gated_ffn expects [C, D, H, W], got {s:?}");
    let c = s[0];
    assert_eq!(
        p.point_a_w.shape()[1],
        c,
        "gated_ffn channel mismatch: params expect {}, input has {c}",
        p.point_a_w.shape()[1]
    );
    let e = p.inner_width();
    let inner_spec = match p.variant {
        FfnVariant::Gdfn => ConvSpec::depthwise(3, e),
        FfnVariant::Gcfn => ConvSpec::same(3),
    };
    let y = channel_layer_norm(f, &p.norm_scale, &p.norm_bias, p.ln_eps)
        .reshape(&[1, c, s[1], s[2], s[3]]);
    let a = y
        .conv3d(&p.point_a_w, Some(&p.point_a_b), &ConvSpec::pointwise())
        .conv3d(&p.inner_a_w, Some(&p.inner_a_b), &inner_spec)
        .gelu();
    let b = y
        .conv3d(&p.point_b_w, Some(&p.point_b_b), &ConvSpec::pointwise())
        .conv3d(&p.inner_b_w, Some(&p.inner_b_b), &inner_spec);
    a.mul(&b)
        .conv3d(&p.point_out_w, Some(&p.point_out_b), &ConvSpec::pointwise())
        .reshape(&[c, s[1], s[2], s[3]])
        .add(f)
}

/// One channel-wise block: MDTA, then GDFN, then (unless ablated) GCFN.
#[derive(Clone)]
pub struct ChannelBlockParams<T: Scalar> {
    pub mdta: MdtaParams<T>,
    pub gdfn: GatedFfnParams<T>,
    pub gcfn: Option<GatedFfnParams<T>>,
}

impl<T: Scalar> ChannelBlockParams<T> {
    pub fn init(
        channels: usize,
        heads: usize,
        expansion: f64,
        use_gcfn: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let ln_eps = 1e-5;
        let mdta = MdtaParams {
            norm_scale: Tensor::full(&[channels], T::ONE),
            norm_bias: Tensor::zeros(&[channels]),
            point_qkv_w: normal_tensor(rng, &[3 * channels, channels, 1, 1, 1], 0.02),
            point_qkv_b: Tensor::zeros(&[3 * channels]),
            depth_qkv_w: normal_tensor(rng, &[3 * channels, 1, 3, 3, 3], 0.02),
            depth_qkv_b: Tensor::zeros(&[3 * channels]),
            temperature: Tensor::full(&[heads], T::ONE),
            point_out_w: normal_tensor(rng, &[channels, channels, 1, 1, 1], 0.02),
            point_out_b: Tensor::zeros(&[channels]),
            heads,
            ln_eps,
        };
        let gdfn = GatedFfnParams::init(channels, expansion, FfnVariant::Gdfn, ln_eps, rng);
        let gcfn = use_gcfn
            .then(|| GatedFfnParams::init(channels, expansion, FfnVariant::Gcfn, ln_eps, rng));
        ChannelBlockParams { mdta, gdfn, gcfn }
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        let m = &self.mdta;
        let mut v = vec![
            m.norm_scale.clone(),
            m.norm_bias.clone(),
            m.point_qkv_w.clone(),
            m.point_qkv_b.clone(),
            m.depth_qkv_w.clone(),
            m.depth_qkv_b.clone(),
            m.temperature.clone(),
            m.point_out_w.clone(),
            m.point_out_b.clone(),
        ];
        v.extend(self.gdfn.tensors());
        if let Some(g) = &self.gcfn {
            v.extend(g.tensors());
        }
        v
    }

    pub fn from_tensors(t: &[Tensor<T>], _channels: usize, heads: usize) -> Self {
        assert!(t.len() == 21 || t.len() == 33, "channel block expects 21 or 33 tensors");
        let ln_eps = 1e-5;
        let mdta = MdtaParams {
            norm_scale: t[0].clone(),
            norm_bias: t[1].clone(),
            point_qkv_w: t[2].clone(),
            point_qkv_b: t[3].clone(),
            depth_qkv_w: t[4].clone(),
            depth_qkv_b: t[5].clone(),
            temperature: t[6].clone(),
            point_out_w: t[7].clone(),
            point_out_b: t[8].clone(),
            heads,
            ln_eps,
        };
        let gdfn = GatedFfnParams::from_tensors(&t[9..21], ln_eps);
        let gcfn =
            (t.len() == 33).then(|| GatedFfnParams::from_tensors(&t[21..33], ln_eps));
        ChannelBlockParams { mdta, gdfn, gcfn }
    }
}

pub fn channel_block<T: Scalar>(f: &Tensor<T>, p: &ChannelBlockParams<T>) -> Tensor<T> {
    let x = mdta(f, &p.mdta);
    let x = gated_ffn(&x, &p.gdfn);
    match &p.gcfn {
        Some(g) => gated_ffn(&x, g),
        None => x,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new((0..n).map(|_| r.random_range(-1.0..1.0)).collect(), shape)
    }

    fn zero_params(p: &mut ChannelBlockParams<f64>) {
        let zero_like = |t: &Tensor<f64>| Tensor::<f64>::zeros(t.shape());
        p.mdta.point_qkv_w = zero_like(&p.mdta.point_qkv_w);
        p.mdta.depth_qkv_w = zero_like(&p.mdta.depth_qkv_w);
        p.mdta.point_out_w = zero_like(&p.mdta.point_out_w);
        for g in [Some(&mut p.gdfn), p.gcfn.as_mut()].into_iter().flatten() {
            g.point_a_w = zero_like(&g.point_a_w);
            g.point_b_w = zero_like(&g.point_b_w);
            g.inner_a_w = zero_like(&g.inner_a_w);
            g.inner_b_w = zero_like(&g.inner_b_w);
            g.point_out_w = zero_like(&g.point_out_w);
        }
    }

    #[test]
    fn ffn_zero_input_zero_biases_gives_zero() {
        let mut r = rng(0);
        let p = GatedFfnParams::<f64>::init(3, 2.0, FfnVariant::Gdfn, 1e-5, &mut r);
        let f = Tensor::zeros(&[3, 2, 2, 2]);
        let y = gated_ffn(&f, &p);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_zero_gate_branch_leaves_bias_plus_residual() {
        let mut r = rng(1);
        let c = 3;
        let mut p = GatedFfnParams::<f64>::init(c, 2.0, FfnVariant::Gdfn, 1e-5, &mut r);
        p.point_b_w = Tensor::zeros(p.point_b_w.shape());
        p.inner_b_w = Tensor::zeros(p.inner_b_w.shape());
        let out_bias: Vec<f64> = (0..c).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        p.point_out_b = Tensor::new(out_bias.clone(), &[c]);
        let f = random_tensor(&mut r, &[c, 2, 2, 2]);
        let y = gated_ffn(&f, &p);
        for ch in 0..c {
            for v in 0..8 {
                let got = y.data()[ch * 8 + v];
                let want = f.data()[ch * 8 + v] + out_bias[ch];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gdfn_embeds_into_gcfn() {
        // A GCFN whose dense kernels are zero off the channel diagonal
        // computes exactly the matching GDFN.
        let mut r = rng(2);
        let c = 3;
        let gdfn = GatedFfnParams::<f64>::init(c, 2.0, FfnVariant::Gdfn, 1e-5, &mut r);
        let e = gdfn.inner_width();
        let embed = |dw: &Tensor<f64>| {
            let mut dense = vec![0.0; e * e * 27];
            for ch in 0..e {
                for k in 0..27 {
                    dense[(ch * e + ch) * 27 + k] = dw.data()[ch * 27 + k];
                }
            }
            Tensor::new(dense, &[e, e, 3, 3, 3])
        };
        let mut gcfn = gdfn.clone();
        gcfn.variant = FfnVariant::Gcfn;
        gcfn.inner_a_w = embed(&gdfn.inner_a_w);
        gcfn.inner_b_w = embed(&gdfn.inner_b_w);

        let f = random_tensor(&mut r, &[c, 3, 3, 3]);
        let a = gated_ffn(&f, &gdfn);
        let b = gated_ffn(&f, &gcfn);
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_weight_block_is_identity_bit_exact() {
        let mut r = rng(3);
        let mut p = ChannelBlockParams::<f64>::init(4, 2, 2.0, true, &mut r);
        zero_params(&mut p);
        let f = random_tensor(&mut r, &[4, 3, 3, 3]);
        let y = channel_block(&f, &p);
        assert_eq!(y.data(), f.data());
    }

    #[test]
    fn shape_preserved() {
        let mut r = rng(4);
        let p = ChannelBlockParams::<f64>::init(4, 2, 2.0, true, &mut r);
        let f = random_tensor(&mut r, &[4, 4, 2, 3]);
        let y = channel_block(&f, &p);
        assert_eq!(y.shape(), f.shape());
    }

    #[test]
    fn dropping_gcfn_changes_the_map() {
        let mut r = rng(5);
        let p = ChannelBlockParams::<f64>::init(4, 2, 2.0, true, &mut r);
        let mut ablated = p.clone();
        ablated.gcfn = None;
        let f = random_tensor(&mut r, &[4, 3, 3, 3]);
        let full = channel_block(&f, &p);
        let without = channel_block(&f, &ablated);
        let linf = full
            .data()
            .iter()
            .zip(without.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(linf > 0.0, "GCFN stage must be distinguishable");
    }
}
