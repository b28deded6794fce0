//! Finite-difference verification of the autodiff engine.
//!
//! [`grad_check`] compares every (optionally sampled) input coordinate's
//! analytic gradient against a central difference computed at fp64, and the
//! suite in [`full_suite`] runs the check over every differentiable op and
//! every composite block up to a micro-configuration of the full model.

use crate::attention::{self, MdtaParams, WindowAttnParams, WindowSpec};
use crate::blocks::{self, FfnVariant, GatedFfnParams, SpatialBlockParams};
use crate::model::{self, ModelConfig};
use crate::tensor::{ConvSpec, PadMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Options for one finite-difference run.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Max relative error allowed for a pass.
    pub tolerance: f64,
    /// Check at most this many coordinates per input (all when `None`).
    pub max_coords_per_input: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
    /// Denominator floor of the relative error, so near-zero gradients
    /// compare on an absolute scale.
    pub abs_floor: f64,
    /// Absolute gap below which a coordinate counts as matching. Central
    /// differences cannot resolve differences under ~1e-10·|loss| (roundoff
    /// at h = 1e-6), so the default is that noise bound with a 100× margin.
    /// `None` derives it from the measured loss.
    pub abs_tol: Option<f64>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            tolerance: 1e-4,
            max_coords_per_input: None,
            seed: 0,
            abs_floor: 1e-6,
            abs_tol: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compare analytic gradients of a scalar-valued map against central
/// differences with step `h = 1e-6 · max(1, |x|)` per coordinate.
pub fn grad_check<F>(
    name: &str,
    f: F,
    inputs: &[(Vec<f64>, Vec<usize>)],
    cfg: &GradCheck,
) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let leaves: Vec<Tensor<f64>> =
        inputs.iter().map(|(d, s)| Tensor::param(d.clone(), s)).collect();
    let loss = f(&leaves);
    assert_eq!(loss.numel(), 1, "grad_check target must be scalar");
    loss.backward();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |data: &[(Vec<f64>, Vec<usize>)]| -> f64 {
        let leaves: Vec<Tensor<f64>> =
            data.iter().map(|(d, s)| Tensor::new(d.clone(), s)).collect();
        f(&leaves).data()[0]
    };

    let abs_tol = cfg.abs_tol.unwrap_or_else(|| 1e-8 * loss.data()[0].abs().max(1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_rel = 0.0_f64;
    let mut coords = 0usize;
    for (i, (data, _)) in inputs.iter().enumerate() {
        let n = data.len();
        let picks: Vec<usize> = match cfg.max_coords_per_input {
            Some(m) if m < n => (0..m).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let h = 1e-6 * data[j].abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[i].0[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].0[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i][j];
            let gap = (a - numeric).abs();
            if gap > abs_tol {
                let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
                let rel = gap / denom;
                if rel > max_rel {
                    max_rel = rel;
                }
            }
            coords += 1;
        }
    }

    GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        coords_checked: coords,
        tolerance: cfg.tolerance,
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor_input(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> (Vec<f64>, Vec<usize>) {
    let n = shape.iter().product();
    (uniform(rng, n, lo, hi), shape.to_vec())
}

struct Check {
    name: &'static str,
    seeds: u64,
    tolerance: f64,
    max_coords: Option<usize>,
    run: Box<dyn Fn(u64, &GradCheck) -> GradCheckReport>,
}

fn op_checks() -> Vec<Check> {
    let mut checks: Vec<Check> = Vec::new();

    macro_rules! check {
        ($name:literal, $seeds:expr, $tol:expr, $coords:expr, $builder:expr) => {
            checks.push(Check {
                name: $name,
                seeds: $seeds,
                tolerance: $tol,
                max_coords: $coords,
                run: Box::new($builder),
            });
        };
    }

    check!("add_broadcast", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let b = tensor_input(&mut rng, &[4], -1.0, 1.0);
        grad_check("add_broadcast", |t| t[0].add(&t[1]).mul(&t[0].add(&t[1])).sum_all(), &[a, b], cfg)
    });
    check!("sub", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[3, 2], -1.0, 1.0);
        let b = tensor_input(&mut rng, &[3, 2], -1.0, 1.0);
        grad_check("sub", |t| t[0].sub(&t[1]).mul(&t[0]).sum_all(), &[a, b], cfg)
    });
    check!("mul_broadcast_middle", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[2, 1, 3], -1.0, 1.0);
        let b = tensor_input(&mut rng, &[1, 4, 1], -1.0, 1.0);
        grad_check("mul_broadcast_middle", |t| t[0].mul(&t[1]).sum_all(), &[a, b], cfg)
    });
    check!("div", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[2, 3], -1.0, 1.0);
        let b = tensor_input(&mut rng, &[2, 3], 0.5, 1.5);
        grad_check("div", |t| t[0].div(&t[1]).sum_all(), &[a, b], cfg)
    });
    check!("neg_scale_add_scalar", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[5], -1.0, 1.0);
        grad_check(
            "neg_scale_add_scalar",
            |t| t[0].neg().scale(0.7).add_scalar(0.3).mul(&t[0]).sum_all(),
            &[a],
            cfg,
        )
    });
    check!("sqrt", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[6], 0.5, 2.0);
        grad_check("sqrt", |t| t[0].sqrt().sum_all(), &[a], cfg)
    });
    check!("gelu", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[7], -2.0, 2.0);
        grad_check("gelu", |t| t[0].gelu().sum_all(), &[a], cfg)
    });
    check!("matmul_batched", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let b = tensor_input(&mut rng, &[4, 2], -1.0, 1.0);
        grad_check("matmul_batched", |t| t[0].matmul(&t[1]).mul(&t[0].matmul(&t[1])).sum_all(), &[a, b], cfg)
    });
    check!("softmax", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[5], -2.0, 2.0);
        let w = tensor_input(&mut rng, &[5], -1.0, 1.0);
        grad_check("softmax", |t| t[0].softmax(0).mul(&t[1]).sum_all(), &[a, w], cfg)
    });
    check!("layer_norm", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tensor_input(&mut rng, &[2, 4], -1.0, 1.0);
        let s = tensor_input(&mut rng, &[4], 0.5, 1.5);
        let b = tensor_input(&mut rng, &[4], -0.5, 0.5);
        grad_check(
            "layer_norm",
            |t| {
                let ln = t[0].layer_norm(&t[1], &t[2], 1e-5);
                ln.mul(&ln).sum_all()
            },
            &[x, s, b],
            cfg,
        )
    });
    check!("conv3d_dense", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tensor_input(&mut rng, &[1, 2, 4, 4, 4], -1.0, 1.0);
        let w = tensor_input(&mut rng, &[3, 2, 3, 3, 3], -0.5, 0.5);
        let b = tensor_input(&mut rng, &[3], -0.5, 0.5);
        grad_check(
            "conv3d_dense",
            |t| t[0].conv3d(&t[1], Some(&t[2]), &ConvSpec::same(3)).sum_all(),
            &[x, w, b],
            cfg,
        )
    });
    check!("conv3d_depthwise", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tensor_input(&mut rng, &[1, 3, 3, 3, 3], -1.0, 1.0);
        let w = tensor_input(&mut rng, &[3, 1, 3, 3, 3], -0.5, 0.5);
        let b = tensor_input(&mut rng, &[3], -0.5, 0.5);
        grad_check(
            "conv3d_depthwise",
            |t| t[0].conv3d(&t[1], Some(&t[2]), &ConvSpec::depthwise(3, 3)).sum_all(),
            &[x, w, b],
            cfg,
        )
    });
    check!("conv3d_strided_grouped", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tensor_input(&mut rng, &[2, 4, 4, 4, 4], -1.0, 1.0);
        let w = tensor_input(&mut rng, &[6, 2, 3, 3, 3], -0.5, 0.5);
        let b = tensor_input(&mut rng, &[6], -0.5, 0.5);
        let spec = ConvSpec::new([3; 3], [2; 3], [1; 3], 2);
        grad_check(
            "conv3d_strided_grouped",
            |t| {
                let y = t[0].conv3d(&t[1], Some(&t[2]), &spec);
                y.mul(&y).sum_all()
            },
            &[x, w, b],
            cfg,
        )
    });
    check!("reshape_permute", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tensor_input(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let w = tensor_input(&mut rng, &[4, 3, 2], -1.0, 1.0);
        grad_check(
            "reshape_permute",
            |t| t[0].permute(&[2, 1, 0]).mul(&t[1]).reshape(&[24]).sum_all(),
            &[x, w],
            cfg,
        )
    });
    check!("concat", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[2, 2], -1.0, 1.0);
        let b = tensor_input(&mut rng, &[2, 3], -1.0, 1.0);
        grad_check(
            "concat",
            |t| {
                let c = Tensor::concat(&[&t[0], &t[1]], 1);
                c.mul(&c).sum_all()
            },
            &[a, b],
            cfg,
        )
    });
    check!("slice", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[3, 4], -1.0, 1.0);
        grad_check(
            "slice",
            |t| {
                let s = t[0].slice(&[1..3, 0..2]);
                s.mul(&s).sum_all()
            },
            &[a],
            cfg,
        )
    });
    check!("pad_zero", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[2, 3], -1.0, 1.0);
        grad_check(
            "pad_zero",
            |t| {
                let p = t[0].pad(&[(1, 0), (1, 2)], PadMode::Zero);
                p.mul(&p).sum_all()
            },
            &[a],
            cfg,
        )
    });
    check!("pad_reflect", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[3, 4], -1.0, 1.0);
        grad_check(
            "pad_reflect",
            |t| {
                let p = t[0].pad(&[(2, 1), (0, 3)], PadMode::Reflect);
                p.mul(&p).sum_all()
            },
            &[a],
            cfg,
        )
    });
    check!("roll", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[3, 4], -1.0, 1.0);
        let w = tensor_input(&mut rng, &[3, 4], -1.0, 1.0);
        grad_check("roll", |t| t[0].roll(&[1, -2]).mul(&t[1]).sum_all(), &[a, w], cfg)
    });
    check!("index_select", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[4, 2], -1.0, 1.0);
        grad_check(
            "index_select",
            |t| {
                let g = t[0].index_select(0, &[3, 1, 1, 0]);
                g.mul(&g).sum_all()
            },
            &[a],
            cfg,
        )
    });
    check!("reductions", 20, 1e-4, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[2, 3, 2], -1.0, 1.0);
        grad_check(
            "reductions",
            |t| {
                let s = t[0].sum_axis(1).mul(&t[0].mean_axis(1));
                s.mean_all()
            },
            &[a],
            cfg,
        )
    });
    check!("softmax_cross_composite", 20, 1e-6, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor_input(&mut rng, &[2, 5], -2.0, 2.0);
        let b = tensor_input(&mut rng, &[2, 5], -1.0, 1.0);
        grad_check(
            "softmax_cross_composite",
            |t| t[0].softmax(1).mul(&t[1]).sum_all(),
            &[a, b],
            cfg,
        )
    });

    checks
}

fn composite_checks() -> Vec<Check> {
    let mut checks: Vec<Check> = Vec::new();

    macro_rules! check {
        ($name:literal, $seeds:expr, $tol:expr, $coords:expr, $builder:expr) => {
            checks.push(Check {
                name: $name,
                seeds: $seeds,
                tolerance: $tol,
                max_coords: $coords,
                run: Box::new($builder),
            });
        };
    }

    check!("window_msa", 5, 1e-4, Some(24), |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d, heads) = (2usize, 4usize, 2usize);
        let tokens = tensor_input(&mut rng, &[2, m * m * m, d], -1.0, 1.0);
        let q = tensor_input(&mut rng, &[d, d], -0.5, 0.5);
        let k = tensor_input(&mut rng, &[d, d], -0.5, 0.5);
        let v = tensor_input(&mut rng, &[d, d], -0.5, 0.5);
        let o = tensor_input(&mut rng, &[d, d], -0.5, 0.5);
        let table_len = (2 * m - 1) * (2 * m - 1) * (2 * m - 1);
        let bias = tensor_input(&mut rng, &[heads, table_len], -0.5, 0.5);
        grad_check(
            "window_msa",
            move |t| {
                let params = WindowAttnParams {
                    query: t[1].clone(),
                    key: t[2].clone(),
                    value: t[3].clone(),
                    out: t[4].clone(),
                    bias_table: t[5].clone(),
                    heads,
                };
                let y = attention::window_msa(&t[0], &params, None, m);
                y.mul(&y).sum_all()
            },
            &[tokens, q, k, v, o, bias],
            cfg,
        )
    });
    check!("shifted_window_msa", 3, 1e-4, Some(20), |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d, heads) = (2usize, 4usize, 2usize);
        let spec = WindowSpec::shifted([4, 4, 4], m);
        let x = tensor_input(&mut rng, &[4, 4, 4, d], -1.0, 1.0);
        let q = tensor_input(&mut rng, &[d, d], -0.5, 0.5);
        let k = tensor_input(&mut rng, &[d, d], -0.5, 0.5);
        let v = tensor_input(&mut rng, &[d, d], -0.5, 0.5);
        let o = tensor_input(&mut rng, &[d, d], -0.5, 0.5);
        let table_len = (2 * m - 1) * (2 * m - 1) * (2 * m - 1);
        let bias = tensor_input(&mut rng, &[heads, table_len], -0.5, 0.5);
        grad_check(
            "shifted_window_msa",
            move |t| {
                let params = WindowAttnParams {
                    query: t[1].clone(),
                    key: t[2].clone(),
                    value: t[3].clone(),
                    out: t[4].clone(),
                    bias_table: t[5].clone(),
                    heads,
                };
                attention::shifted_window_msa(&t[0], &params, &spec).mul(&t[0]).sum_all()
            },
            &[x, q, k, v, o, bias],
            cfg,
        )
    });
    check!("mdta", 3, 1e-4, Some(20), |seed, cfg| {
        let (c, heads) = (4usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = tensor_input(&mut rng, &[c, 3, 3, 3], -1.0, 1.0);
        let inputs = mdta_inputs(&mut rng, c, f);
        grad_check(
            "mdta",
            move |t| {
                let params = mdta_params_from(t, heads);
                let y = attention::mdta(&t[0], &params);
                y.mul(&y).sum_all()
            },
            &inputs,
            cfg,
        )
    });
    check!("gated_ffn_gdfn", 3, 1e-4, Some(20), |seed, cfg| {
        gated_ffn_check(seed, cfg, FfnVariant::Gdfn, "gated_ffn_gdfn")
    });
    check!("gated_ffn_gcfn", 3, 1e-4, Some(20), |seed, cfg| {
        gated_ffn_check(seed, cfg, FfnVariant::Gcfn, "gated_ffn_gcfn")
    });
    check!("spatial_block", 3, 1e-4, Some(12), |seed, cfg| {
        let (m, d, heads) = (2usize, 4usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b);
        let x = tensor_input(&mut rng, &[2, 2, 2, d], -1.0, 1.0);
        let mut inputs = vec![x];
        let p = SpatialBlockParams::init(d, heads, m, 2.0, &mut rng_for(seed));
        flatten_params(&p, &mut inputs);
        grad_check(
            "spatial_block",
            move |t| {
                let p = rebuild_spatial(t, d, heads, m);
                let y = blocks::spatial_block(&t[0], &p, m, 1e-5);
                y.mul(&y).sum_all()
            },
            &inputs,
            cfg,
        )
    });
    check!("channel_block", 3, 1e-4, Some(12), |seed, cfg| {
        let (c, heads) = (4usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1);
        let f = tensor_input(&mut rng, &[c, 3, 3, 3], -1.0, 1.0);
        let mut inputs = vec![f];
        let p = blocks::ChannelBlockParams::init(c, heads, 2.0, true, &mut rng_for(seed));
        flatten_channel(&p, &mut inputs);
        grad_check(
            "channel_block",
            move |t| {
                let p = rebuild_channel(t, c, heads);
                let y = blocks::channel_block(&t[0], &p);
                y.mul(&y).sum_all()
            },
            &inputs,
            cfg,
        )
    });
    check!("resample", 5, 1e-4, Some(24), |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = tensor_input(&mut rng, &[2, 4, 4, 4], -1.0, 1.0);
        let dw = tensor_input(&mut rng, &[4, 2, 3, 3, 3], -0.5, 0.5);
        let dbias = tensor_input(&mut rng, &[4], -0.2, 0.2);
        let uw = tensor_input(&mut rng, &[2, 4, 1, 1, 1], -0.5, 0.5);
        let ubias = tensor_input(&mut rng, &[2], -0.2, 0.2);
        grad_check(
            "resample",
            |t| {
                let down = blocks::downsample(&t[0], &t[1], &t[2]);
                let up = blocks::upsample(&down, &t[3], &t[4]);
                up.mul(&up).sum_all()
            },
            &[f, dw, dbias, uw, ubias],
            cfg,
        )
    });
    check!("patch_embed_merge", 5, 1e-4, Some(24), |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 2usize;
        let d = 3usize;
        let x = tensor_input(&mut rng, &[1, 4, 4, 4], -1.0, 1.0);
        let e = tensor_input(&mut rng, &[p * p * p, d], -0.5, 0.5);
        let merge = tensor_input(&mut rng, &[8 * d, 2 * d], -0.5, 0.5);
        grad_check(
            "patch_embed_merge",
            move |t| {
                let tokens = blocks::patch_embed(&t[0], &t[1], p);
                let merged = blocks::patch_merge(&tokens, &t[2]);
                merged.mul(&merged).sum_all()
            },
            &[x, e, merge],
            cfg,
        )
    });
    check!("charbonnier", 10, 1e-6, None, |seed, cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = tensor_input(&mut rng, &[2, 3, 3], -1.0, 1.0);
        let target = tensor_input(&mut rng, &[2, 3, 3], -1.0, 1.0);
        grad_check(
            "charbonnier",
            |t| crate::train::charbonnier(&t[0], &t[1], 1e-3),
            &[pred, target],
            cfg,
        )
    });
    check!("model_micro", 1, 1e-3, Some(4), |seed, cfg| {
        let config = micro_config();
        let weights = model::build::<f64>(&config, seed ^ 0x77).expect("micro config builds");
        // Randomize the zero-initialized head so gradients flow everywhere.
        let mut weights = weights;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x99);
        weights.randomize_entry("head.weight", 0.05, &mut rng);
        weights.randomize_entry("head.bias", 0.05, &mut rng);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tensor_input(&mut rng, &[1, 16, 16, 16], 0.0, 1.0);
        let mut inputs = vec![x];
        let names: Vec<String> = weights.names().map(str::to_string).collect();
        for name in &names {
            let entry = weights.entry(name).unwrap();
            inputs.push((entry.values.clone(), entry.shape.clone()));
        }
        let cfg2 = config.clone();
        grad_check(
            "model_micro",
            move |t| {
                let mut w = model::ModelWeights::<f64>::empty(cfg2.clone());
                for (i, name) in names.iter().enumerate() {
                    w.push_entry(name.clone(), t[i + 1].shape().to_vec(), t[i + 1].data().to_vec());
                }
                let net = model::SpachModel::from_weights_tensors(
                    &cfg2,
                    names.iter().cloned().zip(t[1..].iter().cloned()).collect(),
                )
                .expect("assemble");
                let y = net.forward(&t[0]).expect("forward");
                y.mul(&y).mean_all()
            },
            &inputs,
            cfg,
        )
    });

    checks
}

/// Micro model used by the full-model gradient check: every structural
/// element present, everything at minimum width. Smallest valid input is
/// 16³ (token grid 4³, merged grid 2³).
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        base_channels: 2,
        patch_size: 4,
        window: 2,
        embed_dim: 8,
        heads_spatial: [2, 4],
        heads_channel: [1, 2, 4, 8],
        enc_blocks: [1, 1, 1, 1],
        dec_blocks: [1, 1, 1, 1],
        refine_blocks: 1,
        spatial_blocks: [1, 1],
        ffn_expansion: 2.0,
        mlp_ratio: 2.0,
        use_gcfn: true,
        ln_eps: 1e-5,
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

type Inputs = Vec<(Vec<f64>, Vec<usize>)>;

fn push(inputs: &mut Inputs, t: &Tensor<f64>) {
    inputs.push((t.data().to_vec(), t.shape().to_vec()));
}

fn mdta_inputs(rng: &mut ChaCha8Rng, c: usize, f: (Vec<f64>, Vec<usize>)) -> Inputs {
    let mut inputs = vec![f];
    inputs.push(tensor_input(rng, &[c], 0.5, 1.5)); // norm scale
    inputs.push(tensor_input(rng, &[c], -0.2, 0.2)); // norm bias
    inputs.push(tensor_input(rng, &[3 * c, c, 1, 1, 1], -0.5, 0.5));
    inputs.push(tensor_input(rng, &[3 * c], -0.2, 0.2));
    inputs.push(tensor_input(rng, &[3 * c, 1, 3, 3, 3], -0.5, 0.5));
    inputs.push(tensor_input(rng, &[3 * c], -0.2, 0.2));
    inputs.push(tensor_input(rng, &[2], 0.8, 1.2)); // temperature (2 heads)
    inputs.push(tensor_input(rng, &[c, c, 1, 1, 1], -0.5, 0.5));
    inputs.push(tensor_input(rng, &[c], -0.2, 0.2));
    inputs
}

fn mdta_params_from(t: &[Tensor<f64>], heads: usize) -> MdtaParams<f64> {
    MdtaParams {
        norm_scale: t[1].clone(),
        norm_bias: t[2].clone(),
        point_qkv_w: t[3].clone(),
        point_qkv_b: t[4].clone(),
        depth_qkv_w: t[5].clone(),
        depth_qkv_b: t[6].clone(),
        temperature: t[7].clone(),
        point_out_w: t[8].clone(),
        point_out_b: t[9].clone(),
        heads,
        ln_eps: 1e-5,
    }
}

fn gated_ffn_check(seed: u64, cfg: &GradCheck, variant: FfnVariant, name: &str) -> GradCheckReport {
    let c = 3usize;
    let e = 6usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = tensor_input(&mut rng, &[c, 3, 3, 3], -1.0, 1.0);
    let inner_shape = match variant {
        FfnVariant::Gdfn => vec![e, 1, 3, 3, 3],
        FfnVariant::Gcfn => vec![e, e, 3, 3, 3],
    };
    let inputs: Inputs = vec![
        f,
        tensor_input(&mut rng, &[c], 0.5, 1.5),
        tensor_input(&mut rng, &[c], -0.2, 0.2),
        tensor_input(&mut rng, &[e, c, 1, 1, 1], -0.5, 0.5),
        tensor_input(&mut rng, &[e], -0.2, 0.2),
        tensor_input(&mut rng, &[e, c, 1, 1, 1], -0.5, 0.5),
        tensor_input(&mut rng, &[e], -0.2, 0.2),
        tensor_input(&mut rng, &inner_shape, -0.4, 0.4),
        tensor_input(&mut rng, &[e], -0.2, 0.2),
        tensor_input(&mut rng, &inner_shape, -0.4, 0.4),
        tensor_input(&mut rng, &[e], -0.2, 0.2),
        tensor_input(&mut rng, &[c, e, 1, 1, 1], -0.5, 0.5),
        tensor_input(&mut rng, &[c], -0.2, 0.2),
    ];
    grad_check(
        name,
        move |t| {
            let p = GatedFfnParams {
                norm_scale: t[1].clone(),
                norm_bias: t[2].clone(),
                point_a_w: t[3].clone(),
                point_a_b: t[4].clone(),
                point_b_w: t[5].clone(),
                point_b_b: t[6].clone(),
                inner_a_w: t[7].clone(),
                inner_a_b: t[8].clone(),
                inner_b_w: t[9].clone(),
                inner_b_b: t[10].clone(),
                point_out_w: t[11].clone(),
                point_out_b: t[12].clone(),
                variant,
                ln_eps: 1e-5,
            };
            let y = blocks::gated_ffn(&t[0], &p);
            y.mul(&y).sum_all()
        },
        &inputs,
        cfg,
    )
}

fn flatten_params(p: &SpatialBlockParams<f64>, inputs: &mut Inputs) {
    for t in p.tensors() {
        push(inputs, &t);
    }
}

fn rebuild_spatial(t: &[Tensor<f64>], d: usize, heads: usize, m: usize) -> SpatialBlockParams<f64> {
    SpatialBlockParams::from_tensors(&t[1..], d, heads, m)
}

fn flatten_channel(p: &blocks::ChannelBlockParams<f64>, inputs: &mut Inputs) {
    for t in p.tensors() {
        push(inputs, &t);
    }
}

fn rebuild_channel(t: &[Tensor<f64>], c: usize, heads: usize) -> blocks::ChannelBlockParams<f64> {
    blocks::ChannelBlockParams::from_tensors(&t[1..], c, heads)
}

/// Run the whole fp64 verification suite; one report per named check, each
/// aggregated over that check's seed count.
pub fn full_suite() -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    for check in op_checks().into_iter().chain(composite_checks()) {
        let mut worst = GradCheckReport {
            name: check.name.to_string(),
            max_rel_err: 0.0,
            coords_checked: 0,
            tolerance: check.tolerance,
        };
        for seed in 0..check.seeds {
            let cfg = GradCheck {
                tolerance: check.tolerance,
                max_coords_per_input: check.max_coords,
                seed: seed ^ 0xfeed,
                abs_floor: 1e-6,
                abs_tol: None,
            };
            let r = (check.run)(seed, &cfg);
            worst.coords_checked += r.coords_checked;
            if r.max_rel_err > worst.max_rel_err {
                worst.max_rel_err = r.max_rel_err;
            }
        }
        reports.push(worst);
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_tight() {
        let r = grad_check(
            "sum_sq",
            |t| t[0].mul(&t[0]).sum_all(),
            &[(vec![0.3, -0.2, 0.5], vec![3])],
            &GradCheck::default(),
        );
        assert!(r.max_rel_err < 1e-10, "err = {}", r.max_rel_err);
    }

    #[test]
    fn hard_zero_gradient_region_passes() {
        // GELU at -50: analytic and numeric sides are both ~0.
        let r = grad_check(
            "gelu_tail",
            |t| t[0].gelu().sum_all(),
            &[(vec![-50.0], vec![1])],
            &GradCheck::default(),
        );
        assert!(r.passed(), "err = {}", r.max_rel_err);
    }
}
