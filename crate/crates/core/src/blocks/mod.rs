//! Composable network blocks: the spatial-wise (window attention) block,
//! the channel-wise (MDTA + gated FFN) block, patch embedding/merging and
//! the up/down scale transitions.

mod channel;
mod resample;
mod spatial;

pub use channel::{
    channel_block, gated_ffn, ChannelBlockParams, FfnVariant, GatedFfnParams,
};
pub use resample::{downsample, upsample};
pub use spatial::{
    patch_embed, patch_merge, spatial_block, LayerNormParams, MlpParams, SpatialBlockParams,
};
