//! Attention kernels against their brute-force oracle twins, plus the
//! structural properties the fast paths must keep: lossless regrouping,
//! permutation equivariance, mask suppression and linear-cost channel
//! attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spach_core::attention::{
    build_shift_mask, mdta, relative_position_index, shifted_window_msa, window_msa,
    window_msa_with_bias, window_partition, window_reverse, MdtaParams, WindowAttnParams,
    WindowSpec,
};
use spach_core::oracle;
use spach_core::tensor::{reset_peak_numel, peak_numel, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| r.random_range(lo..hi)).collect(), shape)
}

fn random_attn_params(r: &mut ChaCha8Rng, d: usize, heads: usize, m: usize) -> WindowAttnParams<f64> {
    let table = (2 * m - 1).pow(3);
    WindowAttnParams {
        query: random_tensor(r, &[d, d], -0.5, 0.5),
        key: random_tensor(r, &[d, d], -0.5, 0.5),
        value: random_tensor(r, &[d, d], -0.5, 0.5),
        out: random_tensor(r, &[d, d], -0.5, 0.5),
        bias_table: random_tensor(r, &[heads, table], -0.5, 0.5),
        heads,
    }
}

fn gathered_bias(params: &WindowAttnParams<f64>, m: usize) -> Vec<f64> {
    let n = m * m * m;
    let idx = relative_position_index(m);
    let table = params.bias_table.data();
    let width = params.bias_table.shape()[1];
    let mut bias = vec![0.0; params.heads * n * n];
    for h in 0..params.heads {
        for (pair, &t) in idx.iter().enumerate() {
            bias[h * n * n + pair] = table[h * width + t];
        }
    }
    bias
}

#[test]
fn window_msa_single_token_window() {
    // M = 1: softmax over one key, so out = Wo·Wv·token regardless of bias
    let mut r = rng(0);
    let d = 4;
    let params = random_attn_params(&mut r, d, 2, 1);
    let tokens = random_tensor(&mut r, &[3, 1, d], -1.0, 1.0);
    let out = window_msa(&tokens, &params, None, 1);
    let expect = tokens.matmul(&params.value).matmul(&params.out);
    for (a, b) in out.data().iter().zip(expect.data().iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn window_msa_zero_logits_averages_values() {
    let mut r = rng(1);
    let d = 4;
    let m = 2;
    let mut params = random_attn_params(&mut r, d, 2, m);
    params.query = Tensor::zeros(&[d, d]);
    params.key = Tensor::zeros(&[d, d]);
    params.bias_table = Tensor::zeros(&[2, 27]);
    let tokens = random_tensor(&mut r, &[2, 8, d], -1.0, 1.0);
    let out = window_msa(&tokens, &params, None, m);
    // each output token is Wo·Wv·(window mean)
    for w in 0..2 {
        let mut mean = vec![0.0; d];
        for t in 0..8 {
            for c in 0..d {
                mean[c] += tokens.data()[(w * 8 + t) * d + c] / 8.0;
            }
        }
        let mv = oracle::matmul_naive(&mean, params.value.data(), 1, d, d);
        let expect = oracle::matmul_naive(&mv, params.out.data(), 1, d, d);
        for t in 0..8 {
            for c in 0..d {
                assert!((out.data()[(w * 8 + t) * d + c] - expect[c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn window_msa_matches_naive_oracle_20_instances() {
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let m = if seed % 2 == 0 { 2 } else { 3 };
        let heads = if seed % 3 == 0 { 1 } else { 2 };
        let d = 4 * heads;
        let n = m * m * m;
        let nw = 1 + (seed as usize % 3);
        let params = random_attn_params(&mut r, d, heads, m);
        let tokens = random_tensor(&mut r, &[nw, n, d], -1.0, 1.0);
        let fast = window_msa(&tokens, &params, None, m);

        let bias = gathered_bias(&params, m);
        let op = oracle::WindowAttnOracle {
            query: params.query.data(),
            key: params.key.data(),
            value: params.value.data(),
            out: params.out.data(),
            bias: &bias,
            heads,
            dim: d,
        };
        let slow = oracle::window_attention_naive(tokens.data(), nw, n, &op, None);
        let max = fast
            .data()
            .iter()
            .zip(slow.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(max < 1e-10, "seed {seed}: max gap {max}");
    }
}

#[test]
fn masked_window_msa_matches_naive_oracle() {
    for seed in 0..5u64 {
        let mut r = rng(100 + seed);
        let m = 2;
        let spec = WindowSpec::shifted([4, 4, 4], m);
        let params = random_attn_params(&mut r, 4, 2, m);
        let tokens = random_tensor(&mut r, &[spec.num_windows(), 8, 4], -1.0, 1.0);
        let mask = build_shift_mask::<f64>(&spec);
        let fast = window_msa(&tokens, &params, Some(&mask), m);
        let bias = gathered_bias(&params, m);
        let op = oracle::WindowAttnOracle {
            query: params.query.data(),
            key: params.key.data(),
            value: params.value.data(),
            out: params.out.data(),
            bias: &bias,
            heads: 2,
            dim: 4,
        };
        let slow = oracle::window_attention_naive(
            tokens.data(),
            spec.num_windows(),
            8,
            &op,
            Some(mask.data()),
        );
        for (a, b) in fast.data().iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn shifted_window_msa_matches_per_region_brute_force() {
    for seed in 0..5u64 {
        let mut r = rng(200 + seed);
        let (m, d, heads) = (2usize, 6usize, 2usize);
        let grid = [4usize, 4, 4];
        let spec = WindowSpec::shifted(grid, m);
        let params = random_attn_params(&mut r, d, heads, m);
        let x = random_tensor(&mut r, &[4, 4, 4, d], -1.0, 1.0);
        let fast = shifted_window_msa(&x, &params, &spec);

        let bias = gathered_bias(&params, m);
        let op = oracle::WindowAttnOracle {
            query: params.query.data(),
            key: params.key.data(),
            value: params.value.data(),
            out: params.out.data(),
            bias: &bias,
            heads,
            dim: d,
        };
        let slow =
            oracle::shifted_window_attention_by_region(x.data(), grid, d, &op, m, m / 2);
        let max = fast
            .data()
            .iter()
            .zip(slow.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(max < 1e-6, "seed {seed}: masked vs per-region gap {max}");
    }
}

#[test]
fn shifted_window_msa_shape_contract() {
    let mut r = rng(300);
    let d = 6;
    let params = random_attn_params(&mut r, d, 2, 2);
    let x = random_tensor(&mut r, &[4, 4, 4, d], -1.0, 1.0);
    let spec = WindowSpec::shifted([4, 4, 4], 2);
    assert_eq!(shifted_window_msa(&x, &params, &spec).shape(), x.shape());
}

#[test]
fn window_msa_equivariant_under_token_permutation() {
    // permuting key/value/query token order (with bias and mask permuted
    // consistently) permutes the output identically
    let mut r = rng(400);
    let (m, d, heads) = (2usize, 4usize, 2usize);
    let n = m * m * m;
    let params = random_attn_params(&mut r, d, heads, m);
    let tokens = random_tensor(&mut r, &[2, n, d], -1.0, 1.0);
    let bias_vec = gathered_bias(&params, m);
    let bias = Tensor::new(bias_vec.clone(), &[heads, n, n]);
    let mask = random_tensor(&mut r, &[2, n, n], -0.5, 0.0);
    let base = window_msa_with_bias(&tokens, &params, Some(&bias), Some(&mask));

    // a fixed permutation of the window slots
    let perm: Vec<usize> = vec![3, 0, 7, 1, 6, 2, 5, 4];
    let tokens_p = tokens.index_select(1, &perm);
    let bias_p = bias.index_select(1, &perm).index_select(2, &perm);
    let mask_p = mask.index_select(1, &perm).index_select(2, &perm);
    let permuted = window_msa_with_bias(&tokens_p, &params, Some(&bias_p), Some(&mask_p));

    for w in 0..2 {
        for (i, &pi) in perm.iter().enumerate() {
            for c in 0..d {
                let a = permuted.data()[(w * n + i) * d + c];
                let b = base.data()[(w * n + pi) * d + c];
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn mask_suppresses_foreign_region_attention_mass() {
    // value projection = identity, input channels = region indicators:
    // output channel r of token i is exactly the attention mass token i
    // puts on region r
    let m = 2usize;
    let grid = [4usize, 4, 4];
    let spec = WindowSpec::shifted(grid, m);
    let labels = spach_core::attention::region_labels(&spec);
    let n = m * m * m;
    let nw = spec.num_windows();

    let mut distinct: Vec<usize> = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let d = distinct.len().max(2);
    let chan_of = |lab: usize| distinct.iter().position(|&l| l == lab).unwrap();

    // tokens in partitioned order, channel = one-hot region indicator
    let mut toks = vec![0.0; nw * n * d];
    for (slot, &lab) in labels.iter().enumerate() {
        toks[slot * d + chan_of(lab)] = 1.0;
    }
    let tokens = Tensor::new(toks, &[nw, n, d]);

    let mut r = rng(500);
    let eye = {
        let mut e = vec![0.0; d * d];
        for i in 0..d {
            e[i * d + i] = 1.0;
        }
        Tensor::new(e, &[d, d])
    };
    let heads = 1;
    let params = WindowAttnParams {
        query: random_tensor(&mut r, &[d, d], -0.01, 0.01),
        key: random_tensor(&mut r, &[d, d], -0.01, 0.01),
        value: eye.clone(),
        out: eye,
        bias_table: Tensor::zeros(&[heads, (2 * m - 1).pow(3)]),
        heads,
    };
    let mask = build_shift_mask::<f64>(&spec);
    let out = window_msa(&tokens, &params, Some(&mask), m);

    let bound = (-100.0_f64).exp() * (n as f64);
    for w in 0..nw {
        for i in 0..n {
            let own = chan_of(labels[w * n + i]);
            for c in 0..d {
                if c == own {
                    continue;
                }
                let mass = out.data()[(w * n + i) * d + c];
                assert!(
                    mass < bound,
                    "window {w} token {i}: foreign mass {mass} vs bound {bound}"
                );
            }
        }
    }
}

#[test]
fn mdta_matches_naive_oracle_20_instances() {
    for seed in 0..20u64 {
        let mut r = rng(600 + seed);
        let heads = if seed % 2 == 0 { 2 } else { 4 };
        let c = 8;
        let dims = [3usize, 4, 3];
        let params = MdtaParams {
            norm_scale: random_tensor(&mut r, &[c], 0.5, 1.5),
            norm_bias: random_tensor(&mut r, &[c], -0.3, 0.3),
            point_qkv_w: random_tensor(&mut r, &[3 * c, c, 1, 1, 1], -0.4, 0.4),
            point_qkv_b: random_tensor(&mut r, &[3 * c], -0.2, 0.2),
            depth_qkv_w: random_tensor(&mut r, &[3 * c, 1, 3, 3, 3], -0.4, 0.4),
            depth_qkv_b: random_tensor(&mut r, &[3 * c], -0.2, 0.2),
            temperature: random_tensor(&mut r, &[heads], 0.5, 2.0),
            point_out_w: random_tensor(&mut r, &[c, c, 1, 1, 1], -0.4, 0.4),
            point_out_b: random_tensor(&mut r, &[c], -0.2, 0.2),
            heads,
            ln_eps: 1e-5,
        };
        let f = random_tensor(&mut r, &[c, dims[0], dims[1], dims[2]], -1.0, 1.0);
        let fast = mdta(&f, &params);

        let op = oracle::MdtaOracle {
            norm_scale: params.norm_scale.data(),
            norm_bias: params.norm_bias.data(),
            point_qkv_w: params.point_qkv_w.data(),
            point_qkv_b: params.point_qkv_b.data(),
            depth_qkv_w: params.depth_qkv_w.data(),
            depth_qkv_b: params.depth_qkv_b.data(),
            temperature: params.temperature.data(),
            point_out_w: params.point_out_w.data(),
            point_out_b: params.point_out_b.data(),
            heads,
            ln_eps: 1e-5,
        };
        let slow = oracle::mdta_naive(f.data(), c, dims, &op);
        let max = fast
            .data()
            .iter()
            .zip(slow.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(max < 1e-10, "seed {seed}: max gap {max}");
    }
}

#[test]
fn mdta_never_materializes_quadratic_voxel_intermediates() {
    // 6³ = 216 voxels: anything quadratic in voxels is ≥ 46656 elements,
    // far above every tensor this computation should allocate
    let mut r = rng(700);
    let c = 4;
    let params = MdtaParams {
        norm_scale: Tensor::full(&[c], 1.0),
        norm_bias: Tensor::zeros(&[c]),
        point_qkv_w: random_tensor(&mut r, &[3 * c, c, 1, 1, 1], -0.4, 0.4),
        point_qkv_b: Tensor::zeros(&[3 * c]),
        depth_qkv_w: random_tensor(&mut r, &[3 * c, 1, 3, 3, 3], -0.4, 0.4),
        depth_qkv_b: Tensor::zeros(&[3 * c]),
        temperature: Tensor::full(&[2], 1.0),
        point_out_w: random_tensor(&mut r, &[c, c, 1, 1, 1], -0.4, 0.4),
        point_out_b: Tensor::zeros(&[c]),
        heads: 2,
        ln_eps: 1e-5,
    };
    let f = random_tensor(&mut r, &[c, 6, 6, 6], -1.0, 1.0);
    let vox = 6 * 6 * 6;
    reset_peak_numel();
    let _ = mdta(&f, &params);
    let peak = peak_numel();
    assert!(peak < vox * vox, "peak allocation {peak} is quadratic in voxels");
    // tightest expected big tensor: the 3C-channel qkv stack
    assert!(peak <= 3 * c * vox, "peak allocation {peak} unexpectedly large");
}

#[test]
fn partition_roundtrip_random_grids() {
    let mut r = rng(800);
    for (grid, m) in [([4usize, 4, 4], 2), ([6, 4, 2], 2), ([3, 3, 3], 3), ([6, 6, 6], 3)] {
        let x = random_tensor(&mut r, &[grid[0], grid[1], grid[2], 5], -1.0, 1.0);
        let back = window_reverse(&window_partition(&x, m), m, grid);
        assert_eq!(back.data(), x.data(), "grid {grid:?} m {m}");
    }
}
