//! Direct 3D cross-correlation with strides, symmetric zero padding and
//! channel groups (dense, grouped, depthwise).
//!
//! Loops are ordered so the innermost pass streams one output row against
//! one shifted input row; that keeps the general kernel usable for both the
//! 1×1×1 pointwise and 3×3×3 depthwise cases the model leans on.

use super::{Scalar, Tensor};

/// Geometry of a 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    /// Kernel extent per spatial axis.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    /// Symmetric zero padding per spatial axis.
    pub padding: [usize; 3],
    /// Must divide both channel counts; `groups == in_channels` is a
    /// depthwise (channel-wise) convolution.
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3], groups: usize) -> Self {
        ConvSpec { kernel, stride, padding, groups }
    }

    /// Dense k³ kernel, stride 1, "same" padding (k odd).
    pub fn same(k: usize) -> Self {
        ConvSpec { kernel: [k; 3], stride: [1; 3], padding: [k / 2; 3], groups: 1 }
    }

    pub fn pointwise() -> Self {
        ConvSpec { kernel: [1; 3], stride: [1; 3], padding: [0; 3], groups: 1 }
    }

    pub fn depthwise(k: usize, channels: usize) -> Self {
        ConvSpec { kernel: [k; 3], stride: [1; 3], padding: [k / 2; 3], groups: channels }
    }

    pub fn out_extent(&self, axis: usize, input: usize) -> usize {
        let k = self.kernel[axis];
        let s = self.stride[axis];
        let p = self.padding[axis];
        assert!(
            input + 2 * p >= k,
            "conv kernel {k} does not fit input extent {input} with padding {p}"
        );
        (input + 2 * p - k) / s + 1
    }
}

/// Valid output range along one axis for a fixed kernel offset `k`:
/// all `o` with `0 <= o*stride + k - pad < input`. Returns `(lo, hi)`
/// (half-open) clamped to `[0, out_extent)`.
fn out_range(input: usize, out_extent: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let s = stride as isize;
    let shift = k as isize - pad as isize;
    // o*s + shift >= 0
    let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
    // o*s + shift <= input-1
    let max_i = input as isize - 1 - shift;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = (max_i / s + 1).min(out_extent as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

struct Geometry {
    n: usize,
    c_in: usize,
    c_out: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    cin_per_group: usize,
    cout_per_group: usize,
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Geometry {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 5, "conv3d input must be [N, C, D, H, W], got {xs:?}");
    assert_eq!(ws.len(), 5, "conv3d weight must be [C_out, C_in/groups, kz, ky, kx], got {ws:?}");
    let (n, c_in) = (xs[0], xs[1]);
    let c_out = ws[0];
    assert_eq!(
        [ws[2], ws[3], ws[4]],
        spec.kernel,
        "conv3d weight kernel dims {:?} do not match spec {:?}",
        &ws[2..],
        spec.kernel
    );
    assert!(
        spec.groups >= 1 && c_in % spec.groups == 0 && c_out % spec.groups == 0,
        "conv3d groups {} must divide in/out channels {c_in}/{c_out}",
        spec.groups
    );
    assert_eq!(
        ws[1],
        c_in / spec.groups,
        "conv3d weight shape {ws:?} inconsistent with C_in {c_in} and groups {}",
        spec.groups
    );
    let in_dims = [xs[2], xs[3], xs[4]];
    let out_dims = [
        spec.out_extent(0, in_dims[0]),
        spec.out_extent(1, in_dims[1]),
        spec.out_extent(2, in_dims[2]),
    ];
    Geometry {
        n,
        c_in,
        c_out,
        in_dims,
        out_dims,
        cin_per_group: c_in / spec.groups,
        cout_per_group: c_out / spec.groups,
    }
}

pub(crate) fn forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> (Vec<T>, Vec<usize>) {
    let g = geometry(x, w, spec);
    if let Some(b) = b {
        assert_eq!(
            b.shape(),
            &[g.c_out],
            "conv3d bias shape {:?} does not match C_out {}",
            b.shape(),
            g.c_out
        );
    }
    let [d, h, wi] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let out_vox = od * oh * ow;
    let in_vox = d * h * wi;
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.padding;
    let [kz_n, ky_n, kx_n] = spec.kernel;

    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::ZERO; g.n * g.c_out * out_vox];
    if let Some(b) = b {
        let bd = b.data();
        for ni in 0..g.n {
            for co in 0..g.c_out {
                let base = (ni * g.c_out + co) * out_vox;
                out[base..base + out_vox].fill(bd[co]);
            }
        }
    }

    let kvol = kz_n * ky_n * kx_n;
    for ni in 0..g.n {
        for co in 0..g.c_out {
            let group = co / g.cout_per_group;
            let obase = (ni * g.c_out + co) * out_vox;
            for cig in 0..g.cin_per_group {
                let ci = group * g.cin_per_group + cig;
                let xbase = (ni * g.c_in + ci) * in_vox;
                let wbase = (co * g.cin_per_group + cig) * kvol;
                for kz in 0..kz_n {
                    let (od_lo, od_hi) = out_range(d, od, sz, pz, kz);
                    for ky in 0..ky_n {
                        let (oh_lo, oh_hi) = out_range(h, oh, sy, py, ky);
                        for kx in 0..kx_n {
                            let (ow_lo, ow_hi) = out_range(wi, ow, sx, px, kx);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let wv = wd[wbase + (kz * ky_n + ky) * kx_n + kx];
                            let len = ow_hi - ow_lo;
                            for odi in od_lo..od_hi {
                                let iz = odi * sz + kz - pz;
                                for ohi in oh_lo..oh_hi {
                                    let iy = ohi * sy + ky - py;
                                    let orow = obase + (odi * oh + ohi) * ow + ow_lo;
                                    let irow = xbase + (iz * h + iy) * wi + (ow_lo * sx + kx - px);
                                    if sx == 1 {
                                        let (orow, irow) = (
                                            &mut out[orow..orow + len],
                                            &xd[irow..irow + len],
                                        );
                                        for (o, &xv) in orow.iter_mut().zip(irow.iter()) {
                                            *o += wv * xv;
                                        }
                                    } else {
                                        for t in 0..len {
                                            out[orow + t] += wv * xd[irow + t * sx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    (out, vec![g.n, g.c_out, od, oh, ow])
}

/// Gradients for input, weight and bias given the output gradient.
pub(crate) fn backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &[T],
    out_shape: &[usize],
    spec: &ConvSpec,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let g = geometry(x, w, spec);
    let [d, h, wi] = g.in_dims;
    let [od, oh, ow] = [out_shape[2], out_shape[3], out_shape[4]];
    let out_vox = od * oh * ow;
    let in_vox = d * h * wi;
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.padding;
    let [kz_n, ky_n, kx_n] = spec.kernel;
    let kvol = kz_n * ky_n * kx_n;

    let xd = x.data();
    let wd = w.data();
    let mut dx = vec![T::ZERO; x.numel()];
    let mut dw = vec![T::ZERO; w.numel()];
    let mut db = vec![T::ZERO; g.c_out];

    for ni in 0..g.n {
        for co in 0..g.c_out {
            let obase = (ni * g.c_out + co) * out_vox;
            let mut bsum = T::ZERO;
            for &gv in &grad[obase..obase + out_vox] {
                bsum += gv;
            }
            db[co] += bsum;
        }
    }

    for ni in 0..g.n {
        for co in 0..g.c_out {
            let group = co / g.cout_per_group;
            let obase = (ni * g.c_out + co) * out_vox;
            for cig in 0..g.cin_per_group {
                let ci = group * g.cin_per_group + cig;
                let xbase = (ni * g.c_in + ci) * in_vox;
                let wbase = (co * g.cin_per_group + cig) * kvol;
                for kz in 0..kz_n {
                    let (od_lo, od_hi) = out_range(d, od, sz, pz, kz);
                    for ky in 0..ky_n {
                        let (oh_lo, oh_hi) = out_range(h, oh, sy, py, ky);
                        for kx in 0..kx_n {
                            let (ow_lo, ow_hi) = out_range(wi, ow, sx, px, kx);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let widx = wbase + (kz * ky_n + ky) * kx_n + kx;
                            let wv = wd[widx];
                            let len = ow_hi - ow_lo;
                            let mut wacc = T::ZERO;
                            for odi in od_lo..od_hi {
                                let iz = odi * sz + kz - pz;
                                for ohi in oh_lo..oh_hi {
                                    let iy = ohi * sy + ky - py;
                                    let orow = obase + (odi * oh + ohi) * ow + ow_lo;
                                    let irow = xbase + (iz * h + iy) * wi + (ow_lo * sx + kx - px);
                                    if sx == 1 {
                                        let grow = &grad[orow..orow + len];
                                        let xrow = &xd[irow..irow + len];
                                        let dxrow = &mut dx[irow..irow + len];
                                        for ((dxv, &gv), &xv) in
                                            dxrow.iter_mut().zip(grow.iter()).zip(xrow.iter())
                                        {
                                            *dxv += wv * gv;
                                            wacc += gv * xv;
                                        }
                                    } else {
                                        for t in 0..len {
                                            let gv = grad[orow + t];
                                            dx[irow + t * sx] += wv * gv;
                                            wacc += gv * xd[irow + t * sx];
                                        }
                                    }
                                }
                            }
                            dw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }

    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_identity_kernel_is_identity() {
        let x = Tensor::new((0..27).map(|i| i as f64 * 0.37 - 3.0).collect(), &[1, 1, 3, 3, 3]);
        let w = Tensor::new(vec![1.0], &[1, 1, 1, 1, 1]);
        let y = x.conv3d(&w, None, &ConvSpec::pointwise());
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_kernel_counts_overlap() {
        let x = Tensor::new(vec![1.0; 27], &[1, 1, 3, 3, 3]);
        let w = Tensor::new(vec![1.0; 27], &[1, 1, 3, 3, 3]);
        let y = x.conv3d(&w, None, &ConvSpec::same(3));
        let d = y.data();
        // center voxel sees the full 3x3x3 neighborhood, corners see 2x2x2
        assert_eq!(d[13], 27.0);
        assert_eq!(d[0], 8.0);
        assert_eq!(d[26], 8.0);
    }

    #[test]
    fn strided_output_extent() {
        let x = Tensor::<f64>::zeros(&[1, 2, 8, 8, 8]);
        let w = Tensor::<f64>::zeros(&[4, 2, 3, 3, 3]);
        let spec = ConvSpec::new([3; 3], [2; 3], [1; 3], 1);
        let y = x.conv3d(&w, None, &spec);
        assert_eq!(y.shape(), &[1, 4, 4, 4, 4]);
    }

    #[test]
    fn bias_broadcasts_per_channel() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        let w = Tensor::<f64>::zeros(&[3, 1, 1, 1, 1]);
        let b = Tensor::new(vec![1.0, 2.0, 3.0], &[3]);
        let y = x.conv3d(&w, Some(&b), &ConvSpec::pointwise());
        assert_eq!(&y.data()[..8], &[1.0; 8]);
        assert_eq!(&y.data()[8..16], &[2.0; 8]);
        assert_eq!(&y.data()[16..], &[3.0; 8]);
    }

    #[test]
    #[should_panic(expected = "groups")]
    fn invalid_group_divisibility_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 2, 2]);
        let w = Tensor::<f64>::zeros(&[4, 1, 1, 1, 1]);
        let _ = x.conv3d(&w, None, &ConvSpec::new([1; 3], [1; 3], [0; 3], 2));
    }
}
