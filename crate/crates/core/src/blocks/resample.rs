//! Scale transitions between levels: strided-conv downsampling (halve
//! spatial, double channels) and nearest-neighbor + pointwise-conv
//! upsampling (double spatial, halve channels).

use crate::tensor::{ConvSpec, Scalar, Tensor};

/// `[C, D, H, W] -> [2C, D/2, H/2, W/2]` via a stride-2 3×3×3 convolution.
pub fn downsample<T: Scalar>(f: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let s = f.shape();
    assert_eq!(s.len(), 4, "downsample expects [C, D, H, W], got {s:?}");
    for (axis, &e) in s[1..].iter().enumerate() {
        assert!(e % 2 == 0, "downsample requires even spatial extents, axis {axis} has {e}");
    }
    let c = s[0];
    assert_eq!(w.shape(), &[2 * c, c, 3, 3, 3], "downsample weight shape {:?}", w.shape());
    let spec = ConvSpec::new([3; 3], [2; 3], [1; 3], 1);
    f.reshape(&[1, c, s[1], s[2], s[3]])
        .conv3d(w, Some(b), &spec)
        .reshape(&[2 * c, s[1] / 2, s[2] / 2, s[3] / 2])
}

/// `[C, D, H, W] -> [C/2, 2D, 2H, 2W]`: nearest-neighbor ×2 repetition
/// followed by a 1×1×1 convolution halving the channels.
pub fn upsample<T: Scalar>(f: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let s = f.shape();
    assert_eq!(s.len(), 4, "upsample expects [C, D, H, W], got {s:?}");
    let c = s[0];
    assert!(c % 2 == 0, "upsample requires an even channel count, got {c}");
    assert_eq!(w.shape(), &[c / 2, c, 1, 1, 1], "upsample weight shape {:?}", w.shape());
    let ones = Tensor::full(&[1, 1, 2, 1, 2, 1, 2], T::ONE);
    let repeated = f
        .reshape(&[c, s[1], 1, s[2], 1, s[3], 1])
        .mul(&ones)
        .reshape(&[1, c, 2 * s[1], 2 * s[2], 2 * s[3]]);
    repeated
        .conv3d(w, Some(b), &ConvSpec::pointwise())
        .reshape(&[c / 2, 2 * s[1], 2 * s[2], 2 * s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn down_then_up_restores_shape() {
        let f = Tensor::<f64>::full(&[12, 8, 8, 8], 0.3);
        let dw = Tensor::<f64>::zeros(&[24, 12, 3, 3, 3]);
        let db = Tensor::<f64>::zeros(&[24]);
        let down = downsample(&f, &dw, &db);
        assert_eq!(down.shape(), &[24, 4, 4, 4]);
        let uw = Tensor::<f64>::zeros(&[12, 24, 1, 1, 1]);
        let ub = Tensor::<f64>::zeros(&[12]);
        let up = upsample(&down, &uw, &ub);
        assert_eq!(up.shape(), f.shape());
    }

    #[test]
    fn center_tap_kernel_subsamples() {
        // single channel, kernel with only the center tap set: output is the
        // input at even coordinates
        let data: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let f = Tensor::new(data, &[1, 4, 4, 4]);
        let mut k = vec![0.0; 2 * 27];
        k[13] = 1.0; // center of the first output channel's kernel
        let w = Tensor::new(k, &[2, 1, 3, 3, 3]);
        let b = Tensor::zeros(&[2]);
        let y = downsample(&f, &w, &b);
        assert_eq!(y.shape(), &[2, 2, 2, 2]);
        for z in 0..2 {
            for yy in 0..2 {
                for x in 0..2 {
                    let want = ((2 * z * 4 + 2 * yy) * 4 + 2 * x) as f64;
                    assert_eq!(y.data()[(z * 2 + yy) * 2 + x], want);
                }
            }
        }
    }

    #[test]
    fn upsample_keeps_constants_constant() {
        let f = Tensor::<f64>::full(&[4, 2, 2, 2], 1.5);
        let w = Tensor::<f64>::full(&[2, 4, 1, 1, 1], 0.25);
        let b = Tensor::new(vec![0.1, -0.1], &[2]);
        let y = upsample(&f, &w, &b);
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        for (ch, want) in [(0usize, 1.5 + 0.1), (1usize, 1.5 - 0.1)] {
            for v in 0..64 {
                assert!((y.data()[ch * 64 + v] - want).abs() < 1e-12);
            }
        }
    }
}
