//! Synthetic data pipeline and quantitative evaluation: phantom volumes
//! with tumor ground truth, image-space low-dose simulation, the SPV1
//! volume format, and PSNR/SSIM/CNR.

mod metrics;
mod phantom;
mod volume;

pub use metrics::{cnr, psnr, ssim, MetricError, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use phantom::{dose_reduce, generate_phantom, Phantom, PhantomError, PhantomSpec};
pub use volume::{read_volume, write_volume, RoiKind, RoiSpec, Volume, VolumeError};
