//! Dual-path 3D transformer for volumetric image denoising.
//!
//! The crate is organized around five pieces:
//!
//! * [`tensor`] — dense tensors with reverse-mode autodiff (matmul, softmax,
//!   3D convolutions, layer norm, GELU, shape ops), f64 for verification and
//!   f32 for training;
//! * [`attention`] — 3D window / shifted-window multi-head self-attention
//!   with relative position bias, and channel-wise transposed attention;
//! * [`blocks`] — spatial-wise and channel-wise transformer blocks, gated
//!   feed-forward variants, patch embedding/merging and resampling;
//! * [`model`] — the full encoder-decoder assembly with residual output,
//!   parameter counting and weight serialization;
//! * [`data`] / [`train`] — synthetic phantom volumes with low-dose Poisson
//!   simulation, PSNR/SSIM/CNR metrics, and the training loop (Charbonnier
//!   loss, AdamW, cosine annealing).
//!
//! [`gradcheck`] hosts the finite-difference verification harness and the
//! full fp64 suite; [`oracle`] holds independent brute-force reference
//! implementations used to pin the fast paths.

pub mod attention;
pub mod blocks;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod train;

pub use tensor::{ConvSpec, PadMode, Scalar, Tensor};
