//! 3D window and shifted-window multi-head self-attention with a learned
//! relative position bias.
//!
//! Token grids are `[gz, gy, gx, d]` with the feature axis last; windows are
//! cubic with extent `M` and tokens inside a window are ordered z-major.

use crate::tensor::{Scalar, Tensor};

/// Attention mask value for token pairs from different pre-shift regions.
/// Finite (rather than -inf) so softmax stays NaN-free in backward; the
/// leakage this allows is bounded by e^-100 per foreign token.
pub const MASK_SUPPRESS: f64 = -100.0;

/// Window geometry over a token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    /// Cubic window extent M.
    pub window: usize,
    /// Cyclic shift per axis: 0 for W-MSA, ⌊M/2⌋ for SW-MSA.
    pub shift: [usize; 3],
    /// Token grid extents (gz, gy, gx); each must be divisible by M.
    pub grid: [usize; 3],
}

impl WindowSpec {
    pub fn plain(grid: [usize; 3], window: usize) -> Self {
        let spec = WindowSpec { window, shift: [0; 3], grid };
        spec.validate();
        spec
    }

    pub fn shifted(grid: [usize; 3], window: usize) -> Self {
        let s = window / 2;
        let spec = WindowSpec { window, shift: [s; 3], grid };
        spec.validate();
        spec
    }

    pub fn validate(&self) {
        assert!(self.window >= 1, "window extent must be >= 1");
        for (axis, &g) in self.grid.iter().enumerate() {
            assert!(
                g % self.window == 0,
                "grid extent {g} on axis {axis} not divisible by window {} (pad first)",
                self.window
            );
        }
        for &s in &self.shift {
            assert!(
                s == 0 || s == self.window / 2,
                "shift {s} must be 0 or {} for window {}",
                self.window / 2,
                self.window
            );
        }
    }

    pub fn num_windows(&self) -> usize {
        self.grid.iter().map(|g| g / self.window).product()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window * self.window
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s != 0)
    }
}

/// Learnable parameters of one window-attention layer. Projections are
/// `d×d` applied on the right of the token matrix; the bias table holds one
/// value per head and per relative offset in each axis range
/// `[-(M-1), M-1]`.
#[derive(Clone)]
pub struct WindowAttnParams<T: Scalar> {
    pub query: Tensor<T>,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
    pub out: Tensor<T>,
    /// `[heads, (2M-1)^3]`
    pub bias_table: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> WindowAttnParams<T> {
    pub fn dim(&self) -> usize {
        self.query.shape()[0]
    }

    pub fn window_from_table(&self) -> usize {
        let len = self.bias_table.shape()[1];
        let side = (len as f64).cbrt().round() as usize;
        debug_assert_eq!(side * side * side, len);
        (side + 1) / 2
    }
}

/// Flat table index of the relative offset between every ordered token pair
/// of an M³ window: index `i * M³ + j` holds the offset of token i relative
/// to token j.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let side = 2 * m - 1;
    let n = m * m * m;
    let pos: Vec<[isize; 3]> = (0..n)
        .map(|t| {
            let z = t / (m * m);
            let y = (t / m) % m;
            let x = t % m;
            [z as isize, y as isize, x as isize]
        })
        .collect();
    let mut idx = Vec::with_capacity(n * n);
    for i in &pos {
        for j in &pos {
            let dz = (i[0] - j[0] + m as isize - 1) as usize;
            let dy = (i[1] - j[1] + m as isize - 1) as usize;
            let dx = (i[2] - j[2] + m as isize - 1) as usize;
            idx.push((dz * side + dy) * side + dx);
        }
    }
    idx
}

/// Regroup a token grid into non-overlapping windows:
/// `[gz, gy, gx, d] -> [num_windows, M³, d]`, z-major within each window.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, m: usize) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "window_partition expects [gz, gy, gx, d], got {s:?}");
    let (gz, gy, gx, d) = (s[0], s[1], s[2], s[3]);
    assert!(
        gz % m == 0 && gy % m == 0 && gx % m == 0,
        "grid {:?} not divisible by window {m} (pad first)",
        &s[..3]
    );
    let (nz, ny, nx) = (gz / m, gy / m, gx / m);
    x.reshape(&[nz, m, ny, m, nx, m, d])
        .permute(&[0, 2, 4, 1, 3, 5, 6])
        .reshape(&[nz * ny * nx, m * m * m, d])
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(w: &Tensor<T>, m: usize, grid: [usize; 3]) -> Tensor<T> {
    let [gz, gy, gx] = grid;
    let d = w.shape()[2];
    let (nz, ny, nx) = (gz / m, gy / m, gx / m);
    w.reshape(&[nz, ny, nx, m, m, m, d])
        .permute(&[0, 3, 1, 4, 2, 5, 6])
        .reshape(&[gz, gy, gx, d])
}

/// Toroidal roll of the three spatial axes of a token grid.
pub fn cyclic_shift<T: Scalar>(x: &Tensor<T>, offsets: [isize; 3]) -> Tensor<T> {
    assert_eq!(x.rank(), 4, "cyclic_shift expects [gz, gy, gx, d]");
    x.roll(&[offsets[0], offsets[1], offsets[2], 0])
}

/// Per-axis region id under the shifted-window partition. Regions cut each
/// axis at `[0, L-M)`, `[L-M, L-shift)`, `[L-shift, L)`; an unshifted axis
/// is a single region.
fn region_of(coord: usize, extent: usize, m: usize, shift: usize) -> usize {
    if shift == 0 {
        0
    } else if coord < extent - m {
        0
    } else if coord < extent - shift {
        1
    } else {
        2
    }
}

/// Region label per token of the (already shifted) grid, window-partitioned
/// ordering: `labels[w * M³ + slot]`.
pub fn region_labels(spec: &WindowSpec) -> Vec<usize> {
    let m = spec.window;
    let [gz, gy, gx] = spec.grid;
    let (nz, ny, nx) = (gz / m, gy / m, gx / m);
    let mut labels = vec![0usize; spec.num_windows() * spec.tokens_per_window()];
    for wz in 0..nz {
        for wy in 0..ny {
            for wx in 0..nx {
                let w = (wz * ny + wy) * nx + wx;
                for tz in 0..m {
                    for ty in 0..m {
                        for tx in 0..m {
                            let slot = (tz * m + ty) * m + tx;
                            let rz = region_of(wz * m + tz, gz, m, spec.shift[0]);
                            let ry = region_of(wy * m + ty, gy, m, spec.shift[1]);
                            let rx = region_of(wx * m + tx, gx, m, spec.shift[2]);
                            labels[w * m * m * m + slot] = (rz * 3 + ry) * 3 + rx;
                        }
                    }
                }
            }
        }
    }
    labels
}

/// Attention mask for SW-MSA: 0 where two tokens of a window come from the
/// same pre-shift region, [`MASK_SUPPRESS`] otherwise. Shape
/// `[num_windows, M³, M³]`.
pub fn build_shift_mask<T: Scalar>(spec: &WindowSpec) -> Tensor<T> {
    spec.validate();
    let n = spec.tokens_per_window();
    let nw = spec.num_windows();
    let labels = region_labels(spec);
    let suppress = T::from_f64(MASK_SUPPRESS);
    let mut data = vec![T::ZERO; nw * n * n];
    for w in 0..nw {
        let lab = &labels[w * n..(w + 1) * n];
        for i in 0..n {
            for j in 0..n {
                if lab[i] != lab[j] {
                    data[(w * n + i) * n + j] = suppress;
                }
            }
        }
    }
    Tensor::new(data, &[nw, n, n])
}

/// Multi-head attention inside each window with an explicit per-head bias
/// matrix. `tokens: [num_windows, M³, d]`, `bias: [heads, M³, M³]`,
/// `mask: [num_windows, M³, M³]`.
pub fn window_msa_with_bias<T: Scalar>(
    tokens: &Tensor<T>,
    params: &WindowAttnParams<T>,
    bias: Option<&Tensor<T>>,
    mask: Option<&Tensor<T>>,
) -> Tensor<T> {
    let s = tokens.shape();
    assert_eq!(s.len(), 3, "window_msa expects [num_windows, M³, d], got {s:?}");
    let (nw, n, d) = (s[0], s[1], s[2]);
    assert_eq!(params.dim(), d, "projection dim {} != token dim {d}", params.dim());
    let h = params.heads;
    assert!(h >= 1 && d % h == 0, "heads {h} must divide token dim {d}");
    let dh = d / h;

    let q = tokens.matmul(&params.query).reshape(&[nw, n, h, dh]).permute(&[0, 2, 1, 3]);
    let k = tokens.matmul(&params.key).reshape(&[nw, n, h, dh]).permute(&[0, 2, 1, 3]);
    let v = tokens.matmul(&params.value).reshape(&[nw, n, h, dh]).permute(&[0, 2, 1, 3]);

    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut logits = q.matmul(&k.transpose_last()).scale(scale); // [nw, h, n, n]
    if let Some(b) = bias {
        assert_eq!(b.shape(), &[h, n, n], "bias shape {:?}", b.shape());
        logits = logits.add(b);
    }
    if let Some(mk) = mask {
        assert_eq!(mk.shape(), &[nw, n, n], "mask shape {:?}", mk.shape());
        logits = logits.add(&mk.reshape(&[nw, 1, n, n]));
    }
    let attn = logits.softmax(3);
    let ctx = attn.matmul(&v); // [nw, h, n, dh]
    ctx.permute(&[0, 2, 1, 3]).reshape(&[nw, n, d]).matmul(&params.out)
}

/// W-MSA over pre-partitioned windows, bias gathered from the relative
/// position table.
pub fn window_msa<T: Scalar>(
    tokens: &Tensor<T>,
    params: &WindowAttnParams<T>,
    mask: Option<&Tensor<T>>,
    m: usize,
) -> Tensor<T> {
    let n = m * m * m;
    assert_eq!(tokens.shape()[1], n, "tokens per window != M³");
    let idx = relative_position_index(m);
    let bias = params.bias_table.index_select(1, &idx).reshape(&[params.heads, n, n]);
    window_msa_with_bias(tokens, params, Some(&bias), mask)
}

/// SW-MSA over a full token grid: cyclic shift, partition, masked window
/// attention, reverse, unshift. With zero shift this degenerates to plain
/// window attention.
pub fn shifted_window_msa<T: Scalar>(
    x: &Tensor<T>,
    params: &WindowAttnParams<T>,
    spec: &WindowSpec,
) -> Tensor<T> {
    spec.validate();
    let s = x.shape();
    assert_eq!(
        [s[0], s[1], s[2]],
        spec.grid,
        "token grid {:?} does not match spec grid {:?}",
        &s[..3],
        spec.grid
    );
    let m = spec.window;
    if !spec.is_shifted() {
        let w = window_partition(x, m);
        let y = window_msa(&w, params, None, m);
        return window_reverse(&y, m, spec.grid);
    }
    let back = [-(spec.shift[0] as isize), -(spec.shift[1] as isize), -(spec.shift[2] as isize)];
    let shifted = cyclic_shift(x, back);
    let w = window_partition(&shifted, m);
    let mask = build_shift_mask::<T>(spec);
    let y = window_msa(&w, params, Some(&mask), m);
    let rev = window_reverse(&y, m, spec.grid);
    cyclic_shift(&rev, [spec.shift[0] as isize, spec.shift[1] as isize, spec.shift[2] as isize])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_2cube_single_window_z_major() {
        // grid 2³, M=2: one window holding all 8 tokens in z-major order
        let data: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let x = Tensor::new(data.clone(), &[2, 2, 2, 1]);
        let w = window_partition(&x, 2);
        assert_eq!(w.shape(), &[1, 8, 1]);
        assert_eq!(w.data(), data.as_slice());
    }

    #[test]
    fn partition_4cube_counts() {
        let x = Tensor::<f64>::zeros(&[4, 4, 4, 3]);
        let w = window_partition(&x, 2);
        assert_eq!(w.shape(), &[8, 8, 3]);
    }

    #[test]
    fn partition_reverse_roundtrip_bit_exact() {
        let data: Vec<f64> = (0..4 * 4 * 4 * 3).map(|i| (i as f64).sin()).collect();
        let x = Tensor::new(data, &[4, 4, 4, 3]);
        let back = window_reverse(&window_partition(&x, 2), 2, [4, 4, 4]);
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn cyclic_shift_roundtrip_bit_exact() {
        let data: Vec<f64> = (0..2 * 4 * 6 * 2).map(|i| (i as f64).cos()).collect();
        let x = Tensor::new(data, &[2, 4, 6, 2]);
        let back = cyclic_shift(&cyclic_shift(&x, [1, -2, 3]), [-1, 2, -3]);
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn shift_mask_zero_when_unshifted() {
        let spec = WindowSpec::plain([4, 4, 4], 2);
        let mask = build_shift_mask::<f64>(&spec);
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shift_mask_1d_boundary_window() {
        // grid 4, M=2, shift=1 along one axis only: the boundary window mixes
        // two regions, so its 2x2 block has -100 off the diagonal.
        let spec = WindowSpec { window: 2, shift: [1, 0, 0], grid: [4, 2, 2] };
        let mask = build_shift_mask::<f64>(&spec);
        assert_eq!(mask.shape(), &[2, 8, 8]);
        // first window: tokens from z in {0,1} -> all same region, all zero
        assert!(mask.data()[..64].iter().all(|&v| v == 0.0));
        // second window: z in {2,3} -> regions differ between z=2 and z=3
        let w1 = &mask.data()[64..];
        let n = 8;
        for i in 0..n {
            for j in 0..n {
                let same_z_half = (i / 4) == (j / 4);
                let expect = if same_z_half { 0.0 } else { MASK_SUPPRESS };
                assert_eq!(w1[i * n + j], expect, "at ({i},{j})");
            }
        }
    }

    #[test]
    fn shift_mask_matches_region_labels_3d() {
        let spec = WindowSpec::shifted([4, 4, 4], 2);
        let mask = build_shift_mask::<f64>(&spec);
        let labels = region_labels(&spec);
        let n = 8;
        for w in 0..spec.num_windows() {
            let lab = &labels[w * n..(w + 1) * n];
            for i in 0..n {
                for j in 0..n {
                    let v = mask.data()[(w * n + i) * n + j];
                    if lab[i] == lab[j] {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_eq!(v, MASK_SUPPRESS);
                    }
                }
            }
        }
        // the corner window mixes up to 8 region labels
        let last = &labels[(spec.num_windows() - 1) * n..];
        let mut distinct: Vec<usize> = last.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 8);
    }

    #[test]
    fn swmsa_shift_zero_degenerates_to_wmsa() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let mut t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
        };
        let x = t(&[4, 4, 4, d]);
        let params = WindowAttnParams {
            query: t(&[d, d]),
            key: t(&[d, d]),
            value: t(&[d, d]),
            out: t(&[d, d]),
            bias_table: t(&[2, 27]),
            heads: 2,
        };
        let spec = WindowSpec::plain([4, 4, 4], 2);
        let a = shifted_window_msa(&x, &params, &spec);
        let w = window_partition(&x, 2);
        let b = window_reverse(&window_msa(&w, &params, None, 2), 2, [4, 4, 4]);
        assert_eq!(a.data(), b.data());
    }
}
