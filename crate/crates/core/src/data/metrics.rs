//! Image-quality metrics: PSNR against the reference peak, windowed SSIM,
//! and contrast-to-noise ratio over regions of interest.

use super::volume::{RoiSpec, Volume};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("volume dims differ: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("reference volume is constant zero, PSNR undefined")]
    ZeroReference,
    #[error("volume {dims:?} smaller than the {window}³ SSIM window")]
    TooSmall { dims: [usize; 3], window: usize },
    #[error("ROI `{0}` resolves to no voxels")]
    EmptyRoi(String),
    #[error("reference ROI needs at least 2 voxels, got {0}")]
    RoiTooSmall(usize),
    #[error("reference ROI has zero standard deviation, CNR undefined")]
    UndefinedCnr,
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `10·log10(peak² / MSE)` with peak the maximum of the reference; returns
/// `f64::INFINITY` when the volumes are identical. Asymmetric by design:
/// the second argument supplies the peak.
pub fn psnr(pred: &Volume, reference: &Volume) -> Result<f64, MetricError> {
    if pred.dims() != reference.dims() {
        return Err(MetricError::DimMismatch(pred.dims(), reference.dims()));
    }
    let peak = reference.data().iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let mut mse = 0.0;
    for (p, r) in pred.data().iter().zip(reference.data().iter()) {
        let d = p - r;
        mse += d * d;
    }
    mse /= pred.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..n)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Valid-mode separable correlation along one axis (the last, W) after
/// which the array is logically rotated so three passes cover all axes.
fn correlate_last_axis(data: &[f64], dims: [usize; 3], kernel: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let [d, h, w] = dims;
    let n = kernel.len();
    let ow = w - n + 1;
    // output rotated to [H, W', D] so the next pass also works on the last axis
    let mut out = vec![0.0; d * h * ow];
    for z in 0..d {
        for y in 0..h {
            let row = &data[(z * h + y) * w..(z * h + y + 1) * w];
            for x in 0..ow {
                let mut s = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    s += kv * row[x + t];
                }
                out[(y * ow + x) * d + z] = s;
            }
        }
    }
    (out, [h, ow, d])
}

fn gaussian_filter_valid(data: &[f64], dims: [usize; 3], kernel: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let (a, da) = correlate_last_axis(data, dims, kernel);
    let (b, db) = correlate_last_axis(&a, da, kernel);
    correlate_last_axis(&b, db, kernel)
}

/// Mean local SSIM over all positions where an 11³ Gaussian window
/// (σ = 1.5) fits entirely inside the volume. Constants K1 = 0.01,
/// K2 = 0.03; dynamic range is the reference's max − min (1 if constant).
pub fn ssim(pred: &Volume, reference: &Volume) -> Result<f64, MetricError> {
    if pred.dims() != reference.dims() {
        return Err(MetricError::DimMismatch(pred.dims(), reference.dims()));
    }
    let dims = pred.dims();
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(MetricError::TooSmall { dims, window: SSIM_WINDOW });
    }
    let mut range =
        reference.data().iter().cloned().fold(f64::MIN, f64::max)
            - reference.data().iter().cloned().fold(f64::MAX, f64::min);
    if range == 0.0 {
        range = 1.0;
    }
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);

    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let p = pred.data();
    let r = reference.data();
    let pp: Vec<f64> = p.iter().map(|v| v * v).collect();
    let rr: Vec<f64> = r.iter().map(|v| v * v).collect();
    let pr: Vec<f64> = p.iter().zip(r.iter()).map(|(a, b)| a * b).collect();

    let (mu_p, _) = gaussian_filter_valid(p, dims, &kernel);
    let (mu_r, _) = gaussian_filter_valid(r, dims, &kernel);
    let (m_pp, _) = gaussian_filter_valid(&pp, dims, &kernel);
    let (m_rr, _) = gaussian_filter_valid(&rr, dims, &kernel);
    let (m_pr, out_dims) = gaussian_filter_valid(&pr, dims, &kernel);

    let n: usize = out_dims.iter().product();
    let mut acc = 0.0;
    for i in 0..n {
        let (mp, mr) = (mu_p[i], mu_r[i]);
        let var_p = m_pp[i] - mp * mp;
        let var_r = m_rr[i] - mr * mr;
        let cov = m_pr[i] - mp * mr;
        let s = ((2.0 * mp * mr + c1) * (2.0 * cov + c2))
            / ((mp * mp + mr * mr + c1) * (var_p + var_r + c2));
        acc += s;
    }
    Ok(acc / n as f64)
}

/// `(mean(tumor) − mean(reference)) / std(reference)` with the population
/// standard deviation; invariant under positive global rescaling.
pub fn cnr(v: &Volume, tumor: &RoiSpec, reference: &RoiSpec) -> Result<f64, MetricError> {
    let t_idx = tumor.resolve(v);
    if t_idx.is_empty() {
        return Err(MetricError::EmptyRoi(tumor.label.clone()));
    }
    let r_idx = reference.resolve(v);
    if r_idx.is_empty() {
        return Err(MetricError::EmptyRoi(reference.label.clone()));
    }
    if r_idx.len() < 2 {
        return Err(MetricError::RoiTooSmall(r_idx.len()));
    }
    let data = v.data();
    let t_mean = t_idx.iter().map(|&i| data[i]).sum::<f64>() / t_idx.len() as f64;
    let r_mean = r_idx.iter().map(|&i| data[i]).sum::<f64>() / r_idx.len() as f64;
    let r_var =
        r_idx.iter().map(|&i| (data[i] - r_mean) * (data[i] - r_mean)).sum::<f64>()
            / r_idx.len() as f64;
    let r_std = r_var.sqrt();
    if r_std == 0.0 {
        return Err(MetricError::UndefinedCnr);
    }
    Ok((t_mean - r_mean) / r_std)
}
