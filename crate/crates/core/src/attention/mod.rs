//! The two attention mechanisms of the network: local 3D (shifted-)window
//! self-attention over token grids and global channel-wise transposed
//! attention over feature maps.

mod mdta;
mod window;

pub use mdta::{channel_layer_norm, mdta, MdtaParams};
pub use window::{
    build_shift_mask, cyclic_shift, region_labels, relative_position_index, shifted_window_msa,
    window_msa, window_msa_with_bias, window_partition, window_reverse, WindowAttnParams,
    WindowSpec, MASK_SUPPRESS,
};
