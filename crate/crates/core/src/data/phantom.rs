//! Synthetic activity phantoms (smoothed ellipsoidal organs plus
//! high-contrast tumor inserts) and image-space low-dose simulation via
//! per-voxel Poisson resampling.

use super::volume::{RoiKind, RoiSpec, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    BadSpec(String),
    #[error("tumor {index} not placeable within bounds after 1000 attempts")]
    TumorPlacement { index: usize },
}

/// Recipe for one synthetic phantom volume.
#[derive(Clone, Debug)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub background: f64,
    pub organ_count: usize,
    /// Additive organ intensity range.
    pub organ_intensity: (f64, f64),
    pub tumor_count: usize,
    pub tumor_radius_mm: (f64, f64),
    /// Tumor amplitude as a multiple of the background level.
    pub tumor_contrast: (f64, f64),
    /// Gaussian smoothing applied to the composed activity field.
    pub smooth_sigma_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            dims: [24, 24, 24],
            voxel_size: [2.0, 2.0, 2.0],
            background: 1.0,
            organ_count: 2,
            organ_intensity: (0.5, 1.5),
            tumor_count: 2,
            tumor_radius_mm: (2.5, 4.5),
            tumor_contrast: (2.0, 4.0),
            smooth_sigma_mm: 2.0,
        }
    }
}

/// A generated phantom: the activity volume, tumor ROIs (ground truth), and
/// a uniform reference ROI inside the largest organ when organs exist.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume,
    pub tumors: Vec<RoiSpec>,
    pub reference: Option<RoiSpec>,
}

struct Organ {
    center_mm: [f64; 3],
    radii_mm: [f64; 3],
    intensity: f64,
}

fn inside_ellipsoid(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> bool {
    let mut q = 0.0;
    for a in 0..3 {
        let t = (p[a] - center[a]) / radii[a];
        q += t * t;
    }
    q <= 1.0
}

/// Border-renormalized separable Gaussian blur (constants stay constant at
/// the boundary).
fn gaussian_blur(data: &mut Vec<f64>, dims: [usize; 3], sigma_vox: [f64; 3]) {
    for axis in 0..3 {
        let sigma = sigma_vox[axis];
        if sigma <= 0.0 {
            continue;
        }
        let radius = (3.0 * sigma).ceil() as usize;
        let kernel: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let d = i as f64 - radius as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let n = dims[axis];
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for l in 0..n {
                    let mut acc = 0.0;
                    let mut norm = 0.0;
                    for (t, &kv) in kernel.iter().enumerate() {
                        let src = l as isize + t as isize - radius as isize;
                        if src < 0 || src as usize >= n {
                            continue;
                        }
                        acc += kv * data[base + src as usize * inner];
                        norm += kv;
                    }
                    out[base + l * inner] = acc / norm;
                }
            }
        }
        *data = out;
    }
}

/// Deterministic in the seed: background + smoothed ellipsoidal organs +
/// tumor spheres placed inside the largest organ (or anywhere in bounds
/// when there are no organs).
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    if spec.dims.iter().any(|&d| d == 0) {
        return Err(PhantomError::BadSpec("dims must be positive".into()));
    }
    if spec.background < 0.0
        || spec.organ_intensity.0 < 0.0
        || spec.tumor_contrast.0 < 0.0
        || spec.tumor_radius_mm.0 <= 0.0
    {
        return Err(PhantomError::BadSpec("intensities must be nonnegative, radii positive".into()));
    }
    if spec.voxel_size.iter().any(|&s| s <= 0.0) {
        return Err(PhantomError::BadSpec("voxel size must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let extent_mm: Vec<f64> =
        spec.dims.iter().zip(spec.voxel_size).map(|(&d, s)| d as f64 * s).collect();

    let range = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };

    let mut organs: Vec<Organ> = Vec::new();
    for _ in 0..spec.organ_count {
        let mut center = [0.0; 3];
        let mut radii = [0.0; 3];
        for a in 0..3 {
            center[a] = rng.random_range(0.35..0.65) * extent_mm[a];
            radii[a] = rng.random_range(0.18..0.32) * extent_mm[a];
        }
        let intensity = range(&mut rng, spec.organ_intensity);
        organs.push(Organ { center_mm: center, radii_mm: radii, intensity });
    }
    let largest = organs
        .iter()
        .enumerate()
        .max_by(|a, b| {
            let va: f64 = a.1.radii_mm.iter().product();
            let vb: f64 = b.1.radii_mm.iter().product();
            va.partial_cmp(&vb).unwrap()
        })
        .map(|(i, _)| i);

    let [d, h, w] = spec.dims;
    let mut field = vec![spec.background; d * h * w];
    let center_of = |z: usize, y: usize, x: usize| -> [f64; 3] {
        [
            (z as f64 + 0.5) * spec.voxel_size[0],
            (y as f64 + 0.5) * spec.voxel_size[1],
            (x as f64 + 0.5) * spec.voxel_size[2],
        ]
    };
    for organ in &organs {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if inside_ellipsoid(center_of(z, y, x), organ.center_mm, organ.radii_mm) {
                        field[(z * h + y) * w + x] += organ.intensity;
                    }
                }
            }
        }
    }

    // tumors: rejection-sample centers so the whole sphere stays inside the
    // volume and (when present) inside the largest organ
    let mut tumors: Vec<RoiSpec> = Vec::new();
    let mut tumor_centers: Vec<([f64; 3], f64)> = Vec::new();
    for t in 0..spec.tumor_count {
        let radius = range(&mut rng, spec.tumor_radius_mm);
        let contrast = range(&mut rng, spec.tumor_contrast);
        let mut placed = None;
        for _ in 0..1000 {
            let mut p = [0.0; 3];
            for a in 0..3 {
                if extent_mm[a] <= 2.0 * radius {
                    break;
                }
                p[a] = rng.random_range(radius..extent_mm[a] - radius);
            }
            let in_bounds = (0..3).all(|a| extent_mm[a] > 2.0 * radius);
            if !in_bounds {
                continue;
            }
            let ok = match largest {
                Some(i) => {
                    let o = &organs[i];
                    let shrunk: [f64; 3] = [
                        (o.radii_mm[0] - radius).max(0.0),
                        (o.radii_mm[1] - radius).max(0.0),
                        (o.radii_mm[2] - radius).max(0.0),
                    ];
                    shrunk.iter().all(|&r| r > 0.0)
                        && inside_ellipsoid(p, o.center_mm, shrunk)
                }
                None => true,
            };
            if ok {
                placed = Some(p);
                break;
            }
        }
        let center = placed.ok_or(PhantomError::TumorPlacement { index: t })?;
        let amplitude = contrast * spec.background;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if inside_ellipsoid(center_of(z, y, x), center, [radius; 3]) {
                        field[(z * h + y) * w + x] += amplitude;
                    }
                }
            }
        }
        tumors.push(RoiSpec::ellipsoid(&format!("tumor_{t}"), center, [radius; 3]));
        tumor_centers.push((center, radius));
    }

    let sigma_vox = [
        spec.smooth_sigma_mm / spec.voxel_size[0],
        spec.smooth_sigma_mm / spec.voxel_size[1],
        spec.smooth_sigma_mm / spec.voxel_size[2],
    ];
    gaussian_blur(&mut field, spec.dims, sigma_vox);

    let volume = Volume::new(spec.dims, spec.voxel_size, field).expect("field is valid");

    // uniform reference region: interior of the largest organ, eroded and
    // kept clear of every tumor by its radius plus the blur scale
    let reference = largest.map(|i| {
        let o = &organs[i];
        let shrunk: [f64; 3] =
            [o.radii_mm[0] * 0.75, o.radii_mm[1] * 0.75, o.radii_mm[2] * 0.75];
        let margin = 2.0 * spec.smooth_sigma_mm
            + spec.voxel_size.iter().cloned().fold(0.0, f64::max);
        let mut voxels = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = center_of(z, y, x);
                    if !inside_ellipsoid(p, o.center_mm, shrunk) {
                        continue;
                    }
                    let clear = tumor_centers.iter().all(|(c, r)| {
                        let dist: f64 = (0..3)
                            .map(|a| (p[a] - c[a]) * (p[a] - c[a]))
                            .sum::<f64>()
                            .sqrt();
                        dist > r + margin
                    });
                    if clear {
                        voxels.push([z, y, x]);
                    }
                }
            }
        }
        RoiSpec { label: "reference".into(), kind: RoiKind::Voxels { voxels } }
    });

    Ok(Phantom { volume, tumors, reference })
}

/// Image-space dose reduction: each voxel is replaced by
/// `Poisson(fraction · scale · value) / (fraction · scale)`, which keeps the
/// expectation equal to the input while scaling the variance like a
/// fraction of detected events.
pub fn dose_reduce(v: &Volume, fraction: f64, scale: f64, seed: u64) -> Volume {
    assert!(fraction > 0.0 && fraction <= 1.0, "dose fraction must be in (0, 1]");
    assert!(scale > 0.0, "counts-per-unit scale must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = fraction * scale;
    let data: Vec<f64> = v
        .data()
        .iter()
        .map(|&x| {
            let lambda = k * x;
            if lambda == 0.0 {
                return 0.0;
            }
            let draw: f64 = Poisson::new(lambda).expect("positive lambda").sample(&mut rng);
            draw / k
        })
        .collect();
    Volume::new(v.dims(), v.voxel_size(), data).expect("poisson output is valid")
}
