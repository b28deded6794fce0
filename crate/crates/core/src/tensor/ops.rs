//! Forward operations and their backward rules.
//!
//! Every differentiable op records itself as an [`Op`] holding handles to its
//! parents; `Op::backward` turns the output gradient into parent gradients.
//! Elementwise binaries broadcast numpy-style (trailing-aligned, extent-1
//! axes repeat). Reductions and matmul accumulate in the operand precision.

use super::conv::{self, ConvSpec};
use super::{GradMap, Scalar, Tensor};
use std::ops::Range;
use std::rc::Rc;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

pub(crate) enum Op<T: Scalar> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Div(Tensor<T>, Tensor<T>),
    Neg(Tensor<T>),
    AddScalar(Tensor<T>),
    MulScalar(Tensor<T>, T),
    Sqrt(Tensor<T>),
    Gelu(Tensor<T>),
    Matmul(Tensor<T>, Tensor<T>),
    Softmax(Tensor<T>, usize),
    LayerNorm { x: Tensor<T>, scale: Tensor<T>, bias: Tensor<T>, eps: T },
    Conv3d { x: Tensor<T>, w: Tensor<T>, b: Option<Tensor<T>>, spec: ConvSpec },
    Reshape(Tensor<T>),
    Permute(Tensor<T>, Vec<usize>),
    Concat(Vec<Tensor<T>>, usize),
    Slice(Tensor<T>, Vec<Range<usize>>),
    Pad(Tensor<T>, Vec<(usize, usize)>, PadMode),
    Roll(Tensor<T>, Vec<isize>),
    IndexSelect(Tensor<T>, usize, Rc<Vec<usize>>),
    Sum(Tensor<T>, Option<usize>),
    Mean(Tensor<T>, Option<usize>),
}

// ── shape helpers ───────────────────────────────────────────────────────

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {a:?} and {b:?} are not broadcast-compatible"
        );
        out[i] = da.max(db);
    }
    out
}

/// Element strides into `shape` for each axis of `out_shape` (0 where the
/// operand is broadcast along that axis).
fn broadcast_strides(out_shape: &[usize], shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let off = n - shape.len();
    let s = strides(shape);
    let mut out = vec![0usize; n];
    for i in 0..shape.len() {
        out[off + i] = if shape[i] == 1 && out_shape[off + i] != 1 { 0 } else { s[i] };
    }
    out
}

/// Visit every element of `out_shape`, yielding (out, a, b) flat indices.
fn for_each_broadcast2(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let sa = broadcast_strides(out_shape, a_shape);
    let sb = broadcast_strides(out_shape, b_shape);
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
}

/// Gather `out[o] = data[offset + Σ coord[d]·stride_for_out_axis[d]]`.
/// Covers permute (permuted strides) and slice (offset + identity strides).
fn regrid<T: Scalar>(
    data: &[T],
    out_shape: &[usize],
    stride_for_out_axis: &[usize],
    offset: usize,
) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; rank];
    let mut idx = offset;
    for _ in 0..numel {
        out.push(data[idx]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            idx += stride_for_out_axis[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            idx -= stride_for_out_axis[d] * out_shape[d];
        }
    }
    out
}

fn roll_data<T: Scalar>(data: &[T], shape: &[usize], shifts: &[isize]) -> Vec<T> {
    let numel: usize = shape.iter().product();
    let rank = shape.len();
    let st = strides(shape);
    let mut out = vec![T::ZERO; numel];
    let mut coords = vec![0usize; rank];
    for item in out.iter_mut().take(numel) {
        let mut src = 0usize;
        for d in 0..rank {
            let n = shape[d] as isize;
            let c = (coords[d] as isize - shifts[d]).rem_euclid(n) as usize;
            src += c * st[d];
        }
        *item = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Sum a gradient of `out_shape` down to `target_shape` (reverse of
/// broadcasting).
fn unbroadcast<T: Scalar>(grad: &[T], out_shape: &[usize], target_shape: &[usize]) -> Vec<T> {
    if out_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![T::ZERO; target_numel];
    for_each_broadcast2(out_shape, target_shape, target_shape, |o, it, _| {
        out[it] += grad[o];
    });
    out
}

// ── 2D matmul kernels (accumulating) ────────────────────────────────────

fn mm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] · b[k,n]ᵀ
fn mm_nt<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::ZERO;
            for (gv, bv) in grow.iter().zip(brow.iter()) {
                s += *gv * *bv;
            }
            *o += s;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · g[m,n]
fn mm_tn<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow.iter()) {
                *o += av * gv;
            }
        }
    }
}

/// Walk the broadcast batch dims of a batched matmul, yielding matrix
/// offsets (in units of one matrix) for out, a and b.
fn for_each_batch(
    batch: &[usize],
    batch_a: &[usize],
    batch_b: &[usize],
    f: impl FnMut(usize, usize, usize),
) {
    if batch.is_empty() {
        let mut f = f;
        f(0, 0, 0);
        return;
    }
    for_each_broadcast2(batch, batch_a, batch_b, f);
}

// ── softmax / layer norm kernels ────────────────────────────────────────

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lanes = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lanes, inner)
}

fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, lanes, inner) = axis_split(shape, axis);
    let mut out = vec![T::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lanes * inner + i;
            let mut max = x[base];
            for l in 1..lanes {
                max = max.maximum(x[base + l * inner]);
            }
            let mut sum = T::ZERO;
            for l in 0..lanes {
                let e = (x[base + l * inner] - max).exp();
                out[base + l * inner] = e;
                sum += e;
            }
            for l in 0..lanes {
                out[base + l * inner] = out[base + l * inner] / sum;
            }
        }
    }
    out
}

// ── forward builders ────────────────────────────────────────────────────

impl<T: Scalar> Tensor<T> {
    fn binary(
        &self,
        other: &Tensor<T>,
        apply: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Tensor<T> {
        if self.shape() == other.shape() {
            let data: Vec<T> = self
                .data()
                .iter()
                .zip(other.data().iter())
                .map(|(&a, &b)| apply(a, b))
                .collect();
            return Tensor::from_op(data, self.shape().to_vec(), op);
        }
        let out_shape = broadcast_shape(self.shape(), other.shape());
        let numel: usize = out_shape.iter().product();
        let mut data = vec![T::ZERO; numel];
        let (a, b) = (self.data(), other.data());
        for_each_broadcast2(&out_shape, self.shape(), other.shape(), |o, ia, ib| {
            data[o] = apply(a[ia], b[ib]);
        });
        Tensor::from_op(data, out_shape, op)
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, |a, b| a + b, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, |a, b| a - b, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, |a, b| a * b, Op::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, |a, b| a / b, Op::Div(self.clone(), other.clone()))
    }

    pub fn neg(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| -v).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Neg(self.clone()))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::MulScalar(self.clone(), c))
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v.sqrt()).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Sqrt(self.clone()))
    }

    /// Exact GELU: x·Φ(x) with Φ the standard normal CDF via erf.
    pub fn gelu(&self) -> Tensor<T> {
        let half = T::from_f64(0.5);
        let data = self
            .data()
            .iter()
            .map(|&v| {
                let phi = half * (T::ONE + (v * T::from_f64(INV_SQRT_2)).erf());
                v * phi
            })
            .collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Gelu(self.clone()))
    }

    /// Batched matrix product `[..., m, k] × [..., k, n] → [..., m, n]`;
    /// leading batch dims broadcast.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            sa.len() >= 2 && sb.len() >= 2,
            "matmul requires rank >= 2 operands: lhs {sa:?}, rhs {sb:?}"
        );
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(ka, kb, "matmul inner dimensions differ: lhs {sa:?}, rhs {sb:?}");
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b);
        let batches: usize = batch.iter().product();
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);

        let mut data = vec![T::ZERO; batches * m * n];
        let (a, b) = (self.data(), other.data());
        for_each_batch(&batch, batch_a, batch_b, |ob, iab, ibb| {
            mm(
                &a[iab * m * ka..(iab + 1) * m * ka],
                &b[ibb * ka * n..(ibb + 1) * ka * n],
                &mut data[ob * m * n..(ob + 1) * m * n],
                m,
                ka,
                n,
            );
        });
        Tensor::from_op(data, out_shape, Op::Matmul(self.clone(), other.clone()))
    }

    /// Numerically stable softmax along `axis`: outputs are nonnegative and
    /// sum to one along that axis.
    pub fn softmax(&self, axis: usize) -> Tensor<T> {
        assert!(axis < self.rank(), "softmax axis {axis} out of range for shape {:?}", self.shape());
        let data = softmax_forward(self.data(), self.shape(), axis);
        Tensor::from_op(data, self.shape().to_vec(), Op::Softmax(self.clone(), axis))
    }

    /// Normalize over the last axis to zero mean / unit variance
    /// (population variance), then apply elementwise scale and bias.
    pub fn layer_norm(&self, scale: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Tensor<T> {
        let c = *self.shape().last().expect("layer_norm needs rank >= 1");
        assert_eq!(
            scale.shape(),
            &[c],
            "layer_norm scale shape {:?} does not match channel extent {c}",
            scale.shape()
        );
        assert_eq!(
            bias.shape(),
            &[c],
            "layer_norm bias shape {:?} does not match channel extent {c}",
            bias.shape()
        );
        let x = self.data();
        let (sc, bi) = (scale.data(), bias.data());
        let rows = x.len() / c;
        let inv_c = T::ONE / T::from_f64(c as f64);
        let mut out = vec![T::ZERO; x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = T::ONE / (var + eps).sqrt();
            for j in 0..c {
                out[r * c + j] = (row[j] - mean) * inv_std * sc[j] + bi[j];
            }
        }
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm { x: self.clone(), scale: scale.clone(), bias: bias.clone(), eps },
        )
    }

    /// 3D cross-correlation (no kernel flip) with symmetric zero padding.
    /// `x: [N, C_in, D, H, W]`, `w: [C_out, C_in/groups, kz, ky, kx]`.
    pub fn conv3d(&self, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Tensor<T> {
        let (data, out_shape) = conv::forward(self, w, b, spec);
        Tensor::from_op(
            data,
            out_shape,
            Op::Conv3d { x: self.clone(), w: w.clone(), b: b.cloned(), spec: *spec },
        )
    }

    /// Same elements, new shape (row-major order preserved, zero copy).
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape from {:?} to {shape:?} changes element count",
            self.shape()
        );
        Tensor::from_op_shared(self.data_rc(), shape.to_vec(), Op::Reshape(self.clone()))
    }

    /// Reorder axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor<T> {
        assert_eq!(perm.len(), self.rank(), "permute {perm:?} does not match rank {}", self.rank());
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            assert!(p < perm.len() && !seen[p], "invalid permutation {perm:?}");
            seen[p] = true;
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let out_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let data = regrid(self.data(), &out_shape, &out_strides, 0);
        Tensor::from_op(data, out_shape, Op::Permute(self.clone(), perm.to_vec()))
    }

    /// Swap the last two axes (matrix transpose over the batch).
    pub fn transpose_last(&self) -> Tensor<T> {
        let r = self.rank();
        assert!(r >= 2, "transpose_last requires rank >= 2, got {:?}", self.shape());
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let rank = parts[0].rank();
        assert!(axis < rank, "concat axis {axis} out of range");
        let mut axis_total = 0;
        for p in parts {
            assert_eq!(p.rank(), rank, "concat rank mismatch");
            for d in 0..rank {
                if d != axis {
                    assert_eq!(
                        p.shape()[d],
                        parts[0].shape()[d],
                        "concat shapes differ off-axis: {:?} vs {:?}",
                        p.shape(),
                        parts[0].shape()
                    );
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![T::ZERO; outer * axis_total * inner];
        let mut offset = 0;
        for p in parts {
            let pa = p.shape()[axis];
            let pd = p.data();
            for o in 0..outer {
                let src = &pd[o * pa * inner..(o + 1) * pa * inner];
                let dst_base = o * axis_total * inner + offset * inner;
                data[dst_base..dst_base + pa * inner].copy_from_slice(src);
            }
            offset += pa;
        }
        let op = Op::Concat(parts.iter().map(|p| (*p).clone()).collect(), axis);
        Tensor::from_op(data, out_shape, op)
    }

    /// Rectangular sub-block given one half-open range per axis.
    pub fn slice(&self, ranges: &[Range<usize>]) -> Tensor<T> {
        assert_eq!(ranges.len(), self.rank(), "slice needs one range per axis");
        for (d, r) in ranges.iter().enumerate() {
            assert!(
                r.start < r.end && r.end <= self.shape()[d],
                "slice range {r:?} invalid for axis {d} of shape {:?}",
                self.shape()
            );
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        let offset: usize = ranges.iter().zip(in_strides.iter()).map(|(r, s)| r.start * s).sum();
        let data = regrid(self.data(), &out_shape, &in_strides, offset);
        Tensor::from_op(data, out_shape, Op::Slice(self.clone(), ranges.to_vec()))
    }

    /// Pad every axis by `(before, after)`; reflect mode mirrors without
    /// repeating the edge sample and requires pad ≤ extent − 1.
    pub fn pad(&self, pads: &[(usize, usize)], mode: PadMode) -> Tensor<T> {
        assert_eq!(pads.len(), self.rank(), "pad needs one (before, after) per axis");
        if mode == PadMode::Reflect {
            for (d, &(b, a)) in pads.iter().enumerate() {
                let n = self.shape()[d];
                assert!(
                    b < n && a < n,
                    "reflect pad ({b},{a}) too large for axis {d} extent {n}"
                );
            }
        }
        let out_shape: Vec<usize> =
            self.shape().iter().zip(pads).map(|(&n, &(b, a))| n + b + a).collect();
        let data = pad_forward(self.data(), self.shape(), &out_shape, pads, mode);
        Tensor::from_op(data, out_shape, Op::Pad(self.clone(), pads.to_vec(), mode))
    }

    /// Toroidal roll: element at index i moves to (i + shift) mod extent.
    pub fn roll(&self, shifts: &[isize]) -> Tensor<T> {
        assert_eq!(shifts.len(), self.rank(), "roll needs one shift per axis");
        let data = roll_data(self.data(), self.shape(), shifts);
        Tensor::from_op(data, self.shape().to_vec(), Op::Roll(self.clone(), shifts.to_vec()))
    }

    /// Gather along `axis`: output extent is `indices.len()`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Tensor<T> {
        assert!(axis < self.rank(), "index_select axis {axis} out of range");
        let n = self.shape()[axis];
        for &i in indices {
            assert!(i < n, "index {i} out of range for axis extent {n}");
        }
        let (outer, _, inner) = axis_split(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = indices.len();
        let x = self.data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * n + i) * inner;
                data.extend_from_slice(&x[base..base + inner]);
            }
        }
        Tensor::from_op(
            data,
            out_shape,
            Op::IndexSelect(self.clone(), axis, Rc::new(indices.to_vec())),
        )
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let mut s = T::ZERO;
        for &v in self.data() {
            s += v;
        }
        Tensor::from_op(vec![s], vec![1], Op::Sum(self.clone(), None))
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let mut s = T::ZERO;
        for &v in self.data() {
            s += v;
        }
        let m = s / T::from_f64(self.numel() as f64);
        Tensor::from_op(vec![m], vec![1], Op::Mean(self.clone(), None))
    }

    /// Sum along `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Tensor<T> {
        assert!(axis < self.rank(), "sum axis {axis} out of range");
        let (outer, lanes, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut data = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for l in 0..lanes {
                let base = (o * lanes + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += x[base + i];
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Tensor::from_op(data, out_shape, Op::Sum(self.clone(), Some(axis)))
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor<T> {
        assert!(axis < self.rank(), "mean axis {axis} out of range");
        let lanes = self.shape()[axis];
        let inv = T::ONE / T::from_f64(lanes as f64);
        let summed = self.sum_axis(axis);
        // Reuse the sum kernel; rebuild as a Mean op for an exact backward.
        let data: Vec<T> = summed.data().iter().map(|&v| v * inv).collect();
        Tensor::from_op(data, summed.shape().to_vec(), Op::Mean(self.clone(), Some(axis)))
    }

    pub(crate) fn from_op_shared(data: Rc<Vec<T>>, shape: Vec<usize>, op: Op<T>) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        if requires_grad {
            Self::make_shared(data, shape, true, Some(op))
        } else {
            Self::make_shared(data, shape, false, None)
        }
    }
}

fn pad_forward<T: Scalar>(
    x: &[T],
    in_shape: &[usize],
    out_shape: &[usize],
    pads: &[(usize, usize)],
    mode: PadMode,
) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let in_strides = strides(in_shape);
    let mut out = vec![T::ZERO; numel];
    let mut coords = vec![0usize; rank];
    for item in out.iter_mut().take(numel) {
        let mut src = Some(0usize);
        for d in 0..rank {
            match pad_src(coords[d], pads[d].0, in_shape[d], mode) {
                Some(i) => {
                    if let Some(s) = src.as_mut() {
                        *s += i * in_strides[d];
                    }
                }
                None => {
                    src = None;
                    break;
                }
            }
        }
        if let Some(s) = src {
            *item = x[s];
        }
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

fn pad_src(o: usize, before: usize, n: usize, mode: PadMode) -> Option<usize> {
    let i = o as isize - before as isize;
    match mode {
        PadMode::Zero => {
            if 0 <= i && (i as usize) < n {
                Some(i as usize)
            } else {
                None
            }
        }
        PadMode::Reflect => {
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i as usize >= n {
                i = 2 * (n as isize - 1) - i;
            }
            Some(i as usize)
        }
    }
}

// ── backward rules ──────────────────────────────────────────────────────

impl<T: Scalar> Op<T> {
    pub(crate) fn parents(&self) -> Vec<Tensor<T>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::Neg(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Sqrt(a)
            | Op::Gelu(a)
            | Op::Softmax(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Slice(a, _)
            | Op::Pad(a, _, _)
            | Op::Roll(a, _)
            | Op::IndexSelect(a, _, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _) => vec![a.clone()],
            Op::LayerNorm { x, scale, bias, .. } => {
                vec![x.clone(), scale.clone(), bias.clone()]
            }
            Op::Conv3d { x, w, b, .. } => {
                let mut v = vec![x.clone(), w.clone()];
                if let Some(b) = b {
                    v.push(b.clone());
                }
                v
            }
            Op::Concat(parts, _) => parts.clone(),
        }
    }

    pub(crate) fn backward(&self, node: &Tensor<T>, grad: &[T], sink: &mut GradMap<T>) {
        match self {
            Op::Add(a, b) => {
                sink.contribute(a, unbroadcast(grad, node.shape(), a.shape()));
                sink.contribute(b, unbroadcast(grad, node.shape(), b.shape()));
            }
            Op::Sub(a, b) => {
                sink.contribute(a, unbroadcast(grad, node.shape(), a.shape()));
                let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
                sink.contribute(b, unbroadcast(&neg, node.shape(), b.shape()));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                let mut da = vec![T::ZERO; a.numel()];
                let mut db = vec![T::ZERO; b.numel()];
                for_each_broadcast2(node.shape(), a.shape(), b.shape(), |o, ia, ib| {
                    da[ia] += grad[o] * bd[ib];
                    db[ib] += grad[o] * ad[ia];
                });
                sink.contribute(a, da);
                sink.contribute(b, db);
            }
            Op::Div(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                let mut da = vec![T::ZERO; a.numel()];
                let mut db = vec![T::ZERO; b.numel()];
                for_each_broadcast2(node.shape(), a.shape(), b.shape(), |o, ia, ib| {
                    da[ia] += grad[o] / bd[ib];
                    db[ib] -= grad[o] * ad[ia] / (bd[ib] * bd[ib]);
                });
                sink.contribute(a, da);
                sink.contribute(b, db);
            }
            Op::Neg(a) => {
                sink.contribute(a, grad.iter().map(|&g| -g).collect());
            }
            Op::AddScalar(a) => {
                sink.contribute(a, grad.to_vec());
            }
            Op::MulScalar(a, c) => {
                sink.contribute(a, grad.iter().map(|&g| g * *c).collect());
            }
            Op::Sqrt(a) => {
                let out = node.data();
                let two = T::from_f64(2.0);
                let dg: Vec<T> =
                    grad.iter().zip(out.iter()).map(|(&g, &s)| g / (two * s)).collect();
                sink.contribute(a, dg);
            }
            Op::Gelu(a) => {
                let half = T::from_f64(0.5);
                let dg: Vec<T> = grad
                    .iter()
                    .zip(a.data().iter())
                    .map(|(&g, &x)| {
                        let phi = half * (T::ONE + (x * T::from_f64(INV_SQRT_2)).erf());
                        let pdf = T::from_f64(INV_SQRT_2PI)
                            * (-(x * x) * T::from_f64(0.5)).exp();
                        g * (phi + x * pdf)
                    })
                    .collect();
                sink.contribute(a, dg);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (a.shape(), b.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch_a = &sa[..sa.len() - 2];
                let batch_b = &sb[..sb.len() - 2];
                let batch = &node.shape()[..node.rank() - 2];
                let (ad, bd) = (a.data(), b.data());
                let mut da = vec![T::ZERO; a.numel()];
                let mut db = vec![T::ZERO; b.numel()];
                for_each_batch(batch, batch_a, batch_b, |ob, iab, ibb| {
                    let g = &grad[ob * m * n..(ob + 1) * m * n];
                    mm_nt(g, &bd[ibb * k * n..(ibb + 1) * k * n], &mut da[iab * m * k..(iab + 1) * m * k], m, k, n);
                    mm_tn(&ad[iab * m * k..(iab + 1) * m * k], g, &mut db[ibb * k * n..(ibb + 1) * k * n], m, k, n);
                });
                sink.contribute(a, da);
                sink.contribute(b, db);
            }
            Op::Softmax(a, axis) => {
                // dx = s ⊙ (g − ⟨g, s⟩ along the axis)
                let s = node.data();
                let (outer, lanes, inner) = axis_split(node.shape(), *axis);
                let mut dg = vec![T::ZERO; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lanes * inner + i;
                        let mut dot = T::ZERO;
                        for l in 0..lanes {
                            let f = base + l * inner;
                            dot += grad[f] * s[f];
                        }
                        for l in 0..lanes {
                            let f = base + l * inner;
                            dg[f] = s[f] * (grad[f] - dot);
                        }
                    }
                }
                sink.contribute(a, dg);
            }
            Op::LayerNorm { x, scale, bias, eps } => {
                let xd = x.data();
                let sc = scale.data();
                let c = sc.len();
                let rows = xd.len() / c;
                let inv_c = T::ONE / T::from_f64(c as f64);
                let mut dx = vec![T::ZERO; xd.len()];
                let mut dscale = vec![T::ZERO; c];
                let mut dbias = vec![T::ZERO; c];
                for r in 0..rows {
                    let row = &xd[r * c..(r + 1) * c];
                    let g = &grad[r * c..(r + 1) * c];
                    let mut mean = T::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean *= inv_c;
                    let mut var = T::ZERO;
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_c;
                    let inv_std = T::ONE / (var + *eps).sqrt();

                    let mut dxh_sum = T::ZERO;
                    let mut dxh_xh_sum = T::ZERO;
                    for j in 0..c {
                        let xh = (row[j] - mean) * inv_std;
                        let dxh = g[j] * sc[j];
                        dscale[j] += g[j] * xh;
                        dbias[j] += g[j];
                        dxh_sum += dxh;
                        dxh_xh_sum += dxh * xh;
                    }
                    for j in 0..c {
                        let xh = (row[j] - mean) * inv_std;
                        let dxh = g[j] * sc[j];
                        let cf = T::from_f64(c as f64);
                        dx[r * c + j] =
                            inv_std * inv_c * (cf * dxh - dxh_sum - xh * dxh_xh_sum);
                    }
                }
                sink.contribute(x, dx);
                sink.contribute(scale, dscale);
                sink.contribute(bias, dbias);
            }
            Op::Conv3d { x, w, b, spec } => {
                let (dx, dw, db) = conv::backward(x, w, grad, node.shape(), spec);
                sink.contribute(x, dx);
                sink.contribute(w, dw);
                if let Some(b) = b {
                    sink.contribute(b, db);
                }
            }
            Op::Reshape(a) => {
                sink.contribute(a, grad.to_vec());
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let out_strides = strides(node.shape());
                let g_strides: Vec<usize> = inv.iter().map(|&p| out_strides[p]).collect();
                sink.contribute(a, regrid(grad, a.shape(), &g_strides, 0));
            }
            Op::Concat(parts, axis) => {
                let out_shape = node.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let pa = p.shape()[*axis];
                    let mut dg = Vec::with_capacity(p.numel());
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        dg.extend_from_slice(&grad[base..base + pa * inner]);
                    }
                    sink.contribute(p, dg);
                    offset += pa;
                }
            }
            Op::Slice(a, ranges) => {
                let in_strides = strides(a.shape());
                let mut dg = vec![T::ZERO; a.numel()];
                let offset: usize =
                    ranges.iter().zip(in_strides.iter()).map(|(r, s)| r.start * s).sum();
                scatter_add(grad, node.shape(), &in_strides, offset, &mut dg);
                sink.contribute(a, dg);
            }
            Op::Pad(a, pads, mode) => {
                let rank = a.rank();
                let in_strides = strides(a.shape());
                let mut dg = vec![T::ZERO; a.numel()];
                let mut coords = vec![0usize; rank];
                for &g in grad.iter() {
                    let mut src = Some(0usize);
                    for d in 0..rank {
                        match pad_src(coords[d], pads[d].0, a.shape()[d], *mode) {
                            Some(i) => {
                                if let Some(s) = src.as_mut() {
                                    *s += i * in_strides[d];
                                }
                            }
                            None => {
                                src = None;
                                break;
                            }
                        }
                    }
                    if let Some(s) = src {
                        dg[s] += g;
                    }
                    for d in (0..rank).rev() {
                        coords[d] += 1;
                        if coords[d] < node.shape()[d] {
                            break;
                        }
                        coords[d] = 0;
                    }
                }
                sink.contribute(a, dg);
            }
            Op::Roll(a, shifts) => {
                let neg: Vec<isize> = shifts.iter().map(|&s| -s).collect();
                sink.contribute(a, roll_data(grad, a.shape(), &neg));
            }
            Op::IndexSelect(a, axis, indices) => {
                let (outer, _, inner) = axis_split(node.shape(), *axis);
                let n = a.shape()[*axis];
                let mut dg = vec![T::ZERO; a.numel()];
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = (o * indices.len() + j) * inner;
                        let dst = (o * n + i) * inner;
                        for t in 0..inner {
                            dg[dst + t] += grad[src + t];
                        }
                    }
                }
                sink.contribute(a, dg);
            }
            Op::Sum(a, axis) => match axis {
                None => {
                    sink.contribute(a, vec![grad[0]; a.numel()]);
                }
                Some(ax) => {
                    let (outer, lanes, inner) = axis_split(a.shape(), *ax);
                    let mut dg = vec![T::ZERO; a.numel()];
                    for o in 0..outer {
                        for l in 0..lanes {
                            let base = (o * lanes + l) * inner;
                            for i in 0..inner {
                                dg[base + i] = grad[o * inner + i];
                            }
                        }
                    }
                    sink.contribute(a, dg);
                }
            },
            Op::Mean(a, axis) => match axis {
                None => {
                    let g = grad[0] / T::from_f64(a.numel() as f64);
                    sink.contribute(a, vec![g; a.numel()]);
                }
                Some(ax) => {
                    let (outer, lanes, inner) = axis_split(a.shape(), *ax);
                    let inv = T::ONE / T::from_f64(lanes as f64);
                    let mut dg = vec![T::ZERO; a.numel()];
                    for o in 0..outer {
                        for l in 0..lanes {
                            let base = (o * lanes + l) * inner;
                            for i in 0..inner {
                                dg[base + i] = grad[o * inner + i] * inv;
                            }
                        }
                    }
                    sink.contribute(a, dg);
                }
            },
        }
    }
}

/// Add `src` (laid out as `src_shape`) into `dst` at affine positions
/// `offset + Σ coord·stride`.
fn scatter_add<T: Scalar>(
    src: &[T],
    src_shape: &[usize],
    stride_for_src_axis: &[usize],
    offset: usize,
    dst: &mut [T],
) {
    let rank = src_shape.len();
    let mut coords = vec![0usize; rank];
    let mut idx = offset;
    for &v in src {
        dst[idx] += v;
        for d in (0..rank).rev() {
            coords[d] += 1;
            idx += stride_for_src_axis[d];
            if coords[d] < src_shape[d] {
                break;
            }
            coords[d] = 0;
            idx -= stride_for_src_axis[d] * src_shape[d];
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn make_shared(
        data: Rc<Vec<T>>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<Op<T>>,
    ) -> Self {
        super::make_shared(data, shape, requires_grad, op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = Tensor::new(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]);
        assert_eq!(a.matmul(&b).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_single_element_contraction() {
        let a = Tensor::new(vec![1.0, 2.0], &[1, 2]);
        let b = Tensor::new(vec![3.0, 4.0], &[2, 1]);
        assert_eq!(a.matmul(&b).data(), &[11.0]);
    }

    #[test]
    #[should_panic(expected = "matmul inner dimensions differ")]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn matmul_broadcasts_batch_dims() {
        // [2,2,3] x [3,2] -> [2,2,2]
        let a = Tensor::new((0..12).map(|i| i as f64).collect(), &[2, 2, 3]);
        let b = Tensor::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), &[2, 2, 2]);
        // row [0,1,2] -> [0*1+1*0+2*1, 0*0+1*1+2*1] = [2, 3]
        assert_eq!(&c.data()[..2], &[2.0, 3.0]);
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let x = Tensor::new(vec![0.0, 0.0], &[2]);
        assert!(close(x.softmax(0).data(), &[0.5, 0.5], 1e-15));

        let x = Tensor::new(vec![1.0_f64.ln(), 3.0_f64.ln()], &[2]);
        assert!(close(x.softmax(0).data(), &[0.25, 0.75], 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(vec![-3.0, 0.5, 11.0, 2.0, -7.0, 0.1], &[2, 3]);
        let s = x.softmax(1);
        for r in 0..2 {
            let sum: f64 = s.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(s.data()[r * 3..(r + 1) * 3].iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::new(vec![5.0; 4], &[1, 4]);
        let scale = Tensor::new(vec![1.0; 4], &[4]);
        let bias = Tensor::new(vec![0.0; 4], &[4]);
        let out = x.layer_norm(&scale, &bias, 1e-5);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_closed_form() {
        let x = Tensor::new(vec![1.0, 3.0], &[1, 2]);
        let scale = Tensor::new(vec![1.0, 1.0], &[2]);
        let bias = Tensor::new(vec![0.0, 0.0], &[2]);
        let out = x.layer_norm(&scale, &bias, 0.0);
        assert!(close(out.data(), &[-1.0, 1.0], 1e-12));
    }

    #[test]
    fn gelu_values() {
        let x = Tensor::new(vec![0.0, 1.0, -10.0], &[3]);
        let y = x.gelu();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.8413447460685429).abs() < 1e-12);
        assert!(y.data()[2].abs() < 1e-8);
    }

    #[test]
    fn reshape_permute_roundtrip() {
        let x = Tensor::new((0..24).map(|i| i as f64).collect(), &[2, 3, 4]);
        let p = x.permute(&[2, 0, 1]);
        let back = p.permute(&[1, 2, 0]);
        assert_eq!(back.data(), x.data());
        let r = x.reshape(&[4, 6]).reshape(&[2, 3, 4]);
        assert_eq!(r.data(), x.data());
    }

    #[test]
    fn roll_matches_spec_example() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[4]);
        assert_eq!(x.roll(&[1]).data(), &[4.0, 1.0, 2.0, 3.0]);
        assert_eq!(x.roll(&[0]).data(), x.data());
        let back = x.roll(&[3]).roll(&[-3]);
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::new(vec![5.0, 6.0], &[2, 1]);
        let c = Tensor::concat(&[&a, &b], 1);
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = c.slice(&[0..2, 0..2]);
        assert_eq!(s.data(), a.data());
    }

    #[test]
    fn pad_reflect_mirrors_without_edge() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]);
        let p = x.pad(&[(2, 2)], PadMode::Reflect);
        assert_eq!(p.data(), &[3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        let z = x.pad(&[(1, 1)], PadMode::Zero);
        assert_eq!(z.data(), &[0.0, 1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn broadcast_add_trailing() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::new(vec![10.0, 20.0], &[2]);
        assert_eq!(x.add(&b).data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn broadcast_mul_middle_axis() {
        // [2,1,2] * [1,3,1] -> [2,3,2]
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 1, 2]);
        let b = Tensor::new(vec![1.0, 10.0, 100.0], &[1, 3, 1]);
        let c = a.mul(&b);
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(
            c.data(),
            &[1.0, 2.0, 10.0, 20.0, 100.0, 200.0, 3.0, 4.0, 30.0, 40.0, 300.0, 400.0]
        );
    }

    #[test]
    fn index_select_gathers_rows() {
        let x = Tensor::new((0..6).map(|i| i as f64).collect(), &[3, 2]);
        let g = x.index_select(0, &[2, 0, 2]);
        assert_eq!(g.shape(), &[3, 2]);
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn reductions() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(x.sum_all().data(), &[21.0]);
        assert_eq!(x.mean_all().data(), &[3.5]);
        assert_eq!(x.sum_axis(0).data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1).data(), &[6.0, 15.0]);
        assert_eq!(x.mean_axis(1).data(), &[2.0, 5.0]);
    }
}
