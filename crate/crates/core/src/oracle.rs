//! Independent brute-force reference implementations used to pin the fast
//! paths. Everything here works on plain f64 slices with open-coded loops
//! and shares no code with the implementations it checks.

/// Naive triple-loop matrix product `a[m,k] · b[k,n]`.
pub fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Maclaurin-series error function; accurate to ~1e-15 for |x| ≤ 3.
pub fn erf_series(x: f64) -> f64 {
    let two_over_sqrt_pi = 2.0 / std::f64::consts::PI.sqrt();
    let mut term = x;
    let mut sum = x;
    let x2 = x * x;
    for n in 1..200 {
        let nf = n as f64;
        term *= -x2 / nf;
        let contrib = term / (2.0 * nf + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-18 {
            break;
        }
    }
    two_over_sqrt_pi * sum
}

/// Direct 3D cross-correlation, seven nested loops, zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_naive(
    x: &[f64],
    x_shape: [usize; 5],
    w: &[f64],
    w_shape: [usize; 5],
    b: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
    groups: usize,
) -> Vec<f64> {
    let [n, c_in, d, h, wi] = x_shape;
    let [c_out, cipg, kz_n, ky_n, kx_n] = w_shape;
    assert_eq!(cipg, c_in / groups);
    let out_d = (d + 2 * pad[0] - kz_n) / stride[0] + 1;
    let out_h = (h + 2 * pad[1] - ky_n) / stride[1] + 1;
    let out_w = (wi + 2 * pad[2] - kx_n) / stride[2] + 1;
    let cog = c_out / groups;
    let mut out = vec![0.0; n * c_out * out_d * out_h * out_w];
    for ni in 0..n {
        for co in 0..c_out {
            let g = co / cog;
            for od in 0..out_d {
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let mut acc = b.map_or(0.0, |b| b[co]);
                        for cig in 0..cipg {
                            let ci = g * cipg + cig;
                            for kz in 0..kz_n {
                                let iz = (od * stride[0] + kz) as isize - pad[0] as isize;
                                if iz < 0 || iz as usize >= d {
                                    continue;
                                }
                                for ky in 0..ky_n {
                                    let iy = (oh * stride[1] + ky) as isize - pad[1] as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    for kx in 0..kx_n {
                                        let ix =
                                            (ow * stride[2] + kx) as isize - pad[2] as isize;
                                        if ix < 0 || ix as usize >= wi {
                                            continue;
                                        }
                                        let xv = x[(((ni * c_in + ci) * d + iz as usize) * h
                                            + iy as usize)
                                            * wi
                                            + ix as usize];
                                        let wv = w[(((co * cipg + cig) * kz_n + kz) * ky_n + ky)
                                            * kx_n
                                            + kx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[(((ni * c_out + co) * out_d + od) * out_h + oh) * out_w + ow] = acc;
                    }
                }
            }
        }
    }
    out
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Raw-slice window attention parameters (projections `d×d` row-major,
/// applied on the right; explicit bias matrix per head).
pub struct WindowAttnOracle<'a> {
    pub query: &'a [f64],
    pub key: &'a [f64],
    pub value: &'a [f64],
    pub out: &'a [f64],
    /// `[heads, n, n]`
    pub bias: &'a [f64],
    pub heads: usize,
    pub dim: usize,
}

/// Per-pair double-loop window attention over `[num_windows, n, d]` tokens,
/// with an optional `[num_windows, n, n]` additive mask.
pub fn window_attention_naive(
    tokens: &[f64],
    num_windows: usize,
    n: usize,
    p: &WindowAttnOracle,
    mask: Option<&[f64]>,
) -> Vec<f64> {
    let d = p.dim;
    let h = p.heads;
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let project = |toks: &[f64], w: &[f64]| -> Vec<f64> {
        // toks [n, d] · w [d, d]
        matmul_naive(toks, w, n, d, d)
    };
    let mut out = vec![0.0; num_windows * n * d];
    for wi in 0..num_windows {
        let toks = &tokens[wi * n * d..(wi + 1) * n * d];
        let q = project(toks, p.query);
        let k = project(toks, p.key);
        let v = project(toks, p.value);
        let mut ctx = vec![0.0; n * d];
        for hh in 0..h {
            let off = hh * dh;
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for t in 0..dh {
                        dot += q[i * d + off + t] * k[j * d + off + t];
                    }
                    let mut val = dot * scale + p.bias[(hh * n + i) * n + j];
                    if let Some(m) = mask {
                        val += m[(wi * n + i) * n + j];
                    }
                    *l = val;
                }
                softmax_row(&mut logits);
                for (j, &a) in logits.iter().enumerate() {
                    for t in 0..dh {
                        ctx[i * d + off + t] += a * v[j * d + off + t];
                    }
                }
            }
        }
        let projected = matmul_naive(&ctx, p.out, n, d, d);
        out[wi * n * d..(wi + 1) * n * d].copy_from_slice(&projected);
    }
    out
}

/// Raw-slice MDTA parameters over a `[c, D, H, W]` channel-first map.
pub struct MdtaOracle<'a> {
    pub norm_scale: &'a [f64],
    pub norm_bias: &'a [f64],
    /// `[3c, c]`
    pub point_qkv_w: &'a [f64],
    pub point_qkv_b: &'a [f64],
    /// `[3c, 27]` depthwise 3×3×3 taps
    pub depth_qkv_w: &'a [f64],
    pub depth_qkv_b: &'a [f64],
    pub temperature: &'a [f64],
    /// `[c, c]`
    pub point_out_w: &'a [f64],
    pub point_out_b: &'a [f64],
    pub heads: usize,
    pub ln_eps: f64,
}

/// Channel attention with the full channel×channel map materialized by
/// explicit loops; layer norm and convolutions open-coded.
pub fn mdta_naive(f: &[f64], c: usize, dims: [usize; 3], p: &MdtaOracle) -> Vec<f64> {
    let [d, h, w] = dims;
    let vox = d * h * w;

    // layer norm over channels at each voxel
    let mut y = vec![0.0; c * vox];
    for v in 0..vox {
        let mut mean = 0.0;
        for ch in 0..c {
            mean += f[ch * vox + v];
        }
        mean /= c as f64;
        let mut var = 0.0;
        for ch in 0..c {
            let t = f[ch * vox + v] - mean;
            var += t * t;
        }
        var /= c as f64;
        let inv = 1.0 / (var + p.ln_eps).sqrt();
        for ch in 0..c {
            y[ch * vox + v] =
                (f[ch * vox + v] - mean) * inv * p.norm_scale[ch] + p.norm_bias[ch];
        }
    }

    // pointwise conv c -> 3c
    let mut point = vec![0.0; 3 * c * vox];
    for oc in 0..3 * c {
        for v in 0..vox {
            let mut acc = p.point_qkv_b[oc];
            for ic in 0..c {
                acc += p.point_qkv_w[oc * c + ic] * y[ic * vox + v];
            }
            point[oc * vox + v] = acc;
        }
    }

    // depthwise 3x3x3, pad 1
    let mut qkv = vec![0.0; 3 * c * vox];
    for oc in 0..3 * c {
        for z in 0..d {
            for yy in 0..h {
                for x in 0..w {
                    let mut acc = p.depth_qkv_b[oc];
                    for kz in 0..3usize {
                        let iz = z as isize + kz as isize - 1;
                        if iz < 0 || iz as usize >= d {
                            continue;
                        }
                        for ky in 0..3usize {
                            let iy = yy as isize + ky as isize - 1;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = x as isize + kx as isize - 1;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                acc += p.depth_qkv_w[oc * 27 + (kz * 3 + ky) * 3 + kx]
                                    * point[oc * vox
                                        + (iz as usize * h + iy as usize) * w
                                        + ix as usize];
                            }
                        }
                    }
                    qkv[oc * vox + (z * h + yy) * w + x] = acc;
                }
            }
        }
    }

    let (q, rest) = qkv.split_at(c * vox);
    let (k, v) = rest.split_at(c * vox);

    // per head: full channel-by-channel attention map
    let heads = p.heads;
    let ch = c / heads;
    let mut ctx = vec![0.0; c * vox];
    for hh in 0..heads {
        let base = hh * ch;
        let mut attn = vec![0.0; ch * ch];
        for i in 0..ch {
            for j in 0..ch {
                let mut dot = 0.0;
                for t in 0..vox {
                    dot += q[(base + i) * vox + t] * k[(base + j) * vox + t];
                }
                attn[i * ch + j] = dot / p.temperature[hh];
            }
        }
        for i in 0..ch {
            softmax_row(&mut attn[i * ch..(i + 1) * ch]);
        }
        for i in 0..ch {
            for j in 0..ch {
                let a = attn[i * ch + j];
                for t in 0..vox {
                    ctx[(base + i) * vox + t] += a * v[(base + j) * vox + t];
                }
            }
        }
    }

    // output pointwise conv + residual
    let mut out = vec![0.0; c * vox];
    for oc in 0..c {
        for t in 0..vox {
            let mut acc = p.point_out_b[oc];
            for ic in 0..c {
                acc += p.point_out_w[oc * c + ic] * ctx[ic * vox + t];
            }
            out[oc * vox + t] = acc + f[oc * vox + t];
        }
    }
    out
}

/// Shifted-window attention computed without the mask trick: tokens are
/// rolled, partitioned, and attention runs independently inside each
/// same-region group of every window.
#[allow(clippy::too_many_arguments)]
pub fn shifted_window_attention_by_region(
    x: &[f64],
    grid: [usize; 3],
    d: usize,
    p: &WindowAttnOracle,
    m: usize,
    shift: usize,
) -> Vec<f64> {
    let [gz, gy, gx] = grid;
    let n = m * m * m;
    let (nz, ny, nx) = (gz / m, gy / m, gx / m);

    // roll by -shift
    let roll = |src: &[f64], s: isize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for z in 0..gz {
            for y in 0..gy {
                for xx in 0..gx {
                    let sz = ((z as isize - s).rem_euclid(gz as isize)) as usize;
                    let sy = ((y as isize - s).rem_euclid(gy as isize)) as usize;
                    let sx = ((xx as isize - s).rem_euclid(gx as isize)) as usize;
                    let dst = ((z * gy + y) * gx + xx) * d;
                    let srcb = ((sz * gy + sy) * gx + sx) * d;
                    out[dst..dst + d].copy_from_slice(&src[srcb..srcb + d]);
                }
            }
        }
        out
    };
    let shifted = roll(x, -(shift as isize));

    let region = |coord: usize, extent: usize| -> usize {
        if shift == 0 {
            0
        } else if coord < extent - m {
            0
        } else if coord < extent - shift {
            1
        } else {
            2
        }
    };

    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out_shifted = vec![0.0; shifted.len()];

    for wz in 0..nz {
        for wy in 0..ny {
            for wx in 0..nx {
                // gather window tokens, their grid coords and region labels
                let mut toks = vec![0.0; n * d];
                let mut labels = vec![0usize; n];
                let mut grid_idx = vec![0usize; n];
                for slot in 0..n {
                    let (tz, ty, tx) = (slot / (m * m), (slot / m) % m, slot % m);
                    let (z, y, xx) = (wz * m + tz, wy * m + ty, wx * m + tx);
                    let g = (z * gy + y) * gx + xx;
                    grid_idx[slot] = g;
                    labels[slot] =
                        (region(z, gz) * 3 + region(y, gy)) * 3 + region(xx, gx);
                    toks[slot * d..(slot + 1) * d].copy_from_slice(&shifted[g * d..(g + 1) * d]);
                }
                let q = matmul_naive(&toks, p.query, n, d, d);
                let k = matmul_naive(&toks, p.key, n, d, d);
                let v = matmul_naive(&toks, p.value, n, d, d);

                let mut ctx = vec![0.0; n * d];
                for hh in 0..p.heads {
                    let off = hh * dh;
                    for i in 0..n {
                        // keys restricted to the same pre-shift region
                        let group: Vec<usize> =
                            (0..n).filter(|&j| labels[j] == labels[i]).collect();
                        let mut logits: Vec<f64> = group
                            .iter()
                            .map(|&j| {
                                let mut dot = 0.0;
                                for t in 0..dh {
                                    dot += q[i * d + off + t] * k[j * d + off + t];
                                }
                                dot * scale + p.bias[(hh * n + i) * n + j]
                            })
                            .collect();
                        softmax_row(&mut logits);
                        for (gi, &j) in group.iter().enumerate() {
                            for t in 0..dh {
                                ctx[i * d + off + t] += logits[gi] * v[j * d + off + t];
                            }
                        }
                    }
                }
                let projected = matmul_naive(&ctx, p.out, n, d, d);
                for slot in 0..n {
                    let g = grid_idx[slot];
                    out_shifted[g * d..(g + 1) * d]
                        .copy_from_slice(&projected[slot * d..(slot + 1) * d]);
                }
            }
        }
    }

    roll(&out_shifted, shift as isize)
}

/// `10·log10(peak²/mse)` by direct summation; peak from the second operand.
pub fn psnr_naive(pred: &[f64], reference: &[f64]) -> f64 {
    let peak = reference.iter().cloned().fold(0.0, f64::max);
    let mse: f64 =
        pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).sum::<f64>() / pred.len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

/// Direct per-window SSIM: every valid 11³ window evaluated with an
/// explicitly materialized 3D Gaussian kernel.
pub fn ssim_naive(pred: &[f64], reference: &[f64], dims: [usize; 3]) -> f64 {
    let win = 11usize;
    let sigma = 1.5;
    let (k1, k2) = (0.01, 0.03);
    let [d, h, w] = dims;

    let mut range = reference.iter().cloned().fold(f64::MIN, f64::max)
        - reference.iter().cloned().fold(f64::MAX, f64::min);
    if range == 0.0 {
        range = 1.0;
    }
    let c1 = (k1 * range) * (k1 * range);
    let c2 = (k2 * range) * (k2 * range);

    let mut kernel = vec![0.0; win * win * win];
    let c = (win as f64 - 1.0) / 2.0;
    let mut total = 0.0;
    for z in 0..win {
        for y in 0..win {
            for x in 0..win {
                let dz = z as f64 - c;
                let dy = y as f64 - c;
                let dx = x as f64 - c;
                let v = (-(dz * dz + dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                kernel[(z * win + y) * win + x] = v;
                total += v;
            }
        }
    }
    for v in &mut kernel {
        *v /= total;
    }

    let mut acc = 0.0;
    let mut count = 0usize;
    for z0 in 0..=(d - win) {
        for y0 in 0..=(h - win) {
            for x0 in 0..=(w - win) {
                let (mut mp, mut mr) = (0.0, 0.0);
                let (mut spp, mut srr, mut spr) = (0.0, 0.0, 0.0);
                for kz in 0..win {
                    for ky in 0..win {
                        for kx in 0..win {
                            let kv = kernel[(kz * win + ky) * win + kx];
                            let idx = ((z0 + kz) * h + y0 + ky) * w + x0 + kx;
                            let (pv, rv) = (pred[idx], reference[idx]);
                            mp += kv * pv;
                            mr += kv * rv;
                            spp += kv * pv * pv;
                            srr += kv * rv * rv;
                            spr += kv * pv * rv;
                        }
                    }
                }
                let var_p = spp - mp * mp;
                let var_r = srr - mr * mr;
                let cov = spr - mp * mr;
                acc += ((2.0 * mp * mr + c1) * (2.0 * cov + c2))
                    / ((mp * mp + mr * mr + c1) * (var_p + var_r + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

/// Contrast-to-noise by direct voxel gather (population std).
pub fn cnr_naive(data: &[f64], tumor_idx: &[usize], ref_idx: &[usize]) -> f64 {
    let tm = tumor_idx.iter().map(|&i| data[i]).sum::<f64>() / tumor_idx.len() as f64;
    let rm = ref_idx.iter().map(|&i| data[i]).sum::<f64>() / ref_idx.len() as f64;
    let rv =
        ref_idx.iter().map(|&i| (data[i] - rm) * (data[i] - rm)).sum::<f64>() / ref_idx.len() as f64;
    (tm - rm) / rv.sqrt()
}

/// One decoupled-weight-decay Adam step, written independently of the
/// optimizer under test. `t` is the 1-based step number.
#[allow(clippy::too_many_arguments)]
pub fn adamw_reference_step(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..w.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        w[i] -= lr * (mh / (vh.sqrt() + eps) + weight_decay * w[i]);
    }
}
