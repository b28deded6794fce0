//! 3D scalar fields (activity volumes) with voxel-size metadata, regions of
//! interest, and the "SPV1" volume file format.
//!
//! SPV1 layout: magic `SPV1`, version u32 LE, dims as three u32 LE
//! (D, H, W), voxel size as three fp32 LE (mm), payload fp32 LE row-major
//! with W fastest.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"SPV1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic, not a SPV1 file")]
    BadMagic,
    #[error("unsupported SPV1 version {0}")]
    BadVersion(u32),
    #[error("file truncated or trailing bytes")]
    Truncated,
    #[error("volume dims must be positive, got {0:?}")]
    ZeroDim([usize; 3]),
    #[error("volume data length {got} does not match dims {dims:?}")]
    SizeMismatch { dims: [usize; 3], got: usize },
    #[error("volume values must be finite and nonnegative")]
    BadValue,
}

/// Dense nonnegative 3D scalar field, row-major (W fastest), with physical
/// voxel size in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], data: Vec<f64>) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::ZeroDim(dims));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(VolumeError::SizeMismatch { dims, got: data.len() });
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(VolumeError::BadValue);
        }
        Ok(Volume { dims, voxel_size, data })
    }

    pub fn constant(dims: [usize; 3], voxel_size: [f64; 3], value: f64) -> Self {
        let n: usize = dims.iter().product();
        Volume::new(dims, voxel_size, vec![value; n]).expect("constant volume is valid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    /// Physical position of a voxel center in mm.
    pub fn voxel_center_mm(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        [
            (z as f64 + 0.5) * self.voxel_size[0],
            (y as f64 + 0.5) * self.voxel_size[1],
            (x as f64 + 0.5) * self.voxel_size[2],
        ]
    }

    /// Axis-aligned sub-volume with the same voxel size.
    pub fn crop(&self, corner: [usize; 3], size: [usize; 3]) -> Volume {
        let [d, h, w] = self.dims;
        assert!(
            corner[0] + size[0] <= d && corner[1] + size[1] <= h && corner[2] + size[2] <= w,
            "crop {corner:?}+{size:?} exceeds dims {:?}",
            self.dims
        );
        let mut data = Vec::with_capacity(size.iter().product());
        for z in corner[0]..corner[0] + size[0] {
            for y in corner[1]..corner[1] + size[1] {
                let base = (z * h + y) * w + corner[2];
                data.extend_from_slice(&self.data[base..base + size[2]]);
            }
        }
        Volume { dims: size, voxel_size: self.voxel_size, data }
    }
}

/// Region of interest: an ellipsoid in physical coordinates or an explicit
/// voxel list.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RoiSpec {
    pub label: String,
    pub kind: RoiKind,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum RoiKind {
    Ellipsoid { center_mm: [f64; 3], radii_mm: [f64; 3] },
    Voxels { voxels: Vec<[usize; 3]> },
}

impl RoiSpec {
    pub fn ellipsoid(label: &str, center_mm: [f64; 3], radii_mm: [f64; 3]) -> Self {
        RoiSpec { label: label.to_string(), kind: RoiKind::Ellipsoid { center_mm, radii_mm } }
    }

    /// Flat indices of the volume voxels whose centers fall inside the ROI.
    pub fn resolve(&self, v: &Volume) -> Vec<usize> {
        let [d, h, w] = v.dims();
        match &self.kind {
            RoiKind::Ellipsoid { center_mm, radii_mm } => {
                let mut out = Vec::new();
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            let p = v.voxel_center_mm(z, y, x);
                            let mut q = 0.0;
                            for a in 0..3 {
                                let t = (p[a] - center_mm[a]) / radii_mm[a];
                                q += t * t;
                            }
                            if q <= 1.0 {
                                out.push((z * h + y) * w + x);
                            }
                        }
                    }
                }
                out
            }
            RoiKind::Voxels { voxels } => voxels
                .iter()
                .filter(|[z, y, x]| *z < d && *y < h && *x < w)
                .map(|[z, y, x]| (z * h + y) * w + x)
                .collect(),
        }
    }
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<(), VolumeError> {
    let [d, h, w] = v.dims;
    let mut buf: Vec<u8> = Vec::with_capacity(4 + 4 + 12 + 12 + v.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for e in [d, h, w] {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for s in v.voxel_size {
        buf.extend_from_slice(&(s as f32).to_le_bytes());
    }
    for &x in &v.data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume, VolumeError> {
    let data = fs::read(path)?;
    if data.len() < 32 {
        return Err(if data.get(..4) == Some(MAGIC) {
            VolumeError::Truncated
        } else {
            VolumeError::BadMagic
        });
    }
    if &data[..4] != MAGIC {
        return Err(VolumeError::BadMagic);
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(VolumeError::BadVersion(version));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(data[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(VolumeError::ZeroDim(dims));
    }
    let mut voxel_size = [0f64; 3];
    for (i, s) in voxel_size.iter_mut().enumerate() {
        *s = f32::from_le_bytes(data[20 + 4 * i..24 + 4 * i].try_into().unwrap()) as f64;
    }
    let numel: usize = dims.iter().product();
    let payload = &data[32..];
    if payload.len() != numel * 4 {
        return Err(VolumeError::Truncated);
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Volume::new(dims, voxel_size, values)
}
