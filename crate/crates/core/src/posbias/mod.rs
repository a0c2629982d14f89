//! Positional priors: implicit low-rank bias, RPB tables and axial RoPE.

mod analysis;
mod cache;
mod fit;
mod fourier;
mod geometry;
mod rib;
mod rope;
mod rpb;

pub use analysis::{bias_by_offset, offset_group_size, OffsetTable};
pub use cache::{PosTokenCache, PosTokens};
pub use fit::{fit_rib_to_bias, fit_rib_to_rpb, rib_bias_matrix, FitConfig, FitResult};
pub use fourier::{embed_width, fourier_embed};
pub use geometry::{axis_coordinate, WindowGeometry};
pub use rib::{
    rib_param_count, rib_param_count_for, rib_positional_tokens, rib_tokens_on_tape, RibParams,
    RibVars, RIB_PARAM_NAMES,
};
pub use rope::{rope_rotate, RopeConfig, RopeTable, ROPE_BASE};
pub use rpb::{
    gaussian_bump, offset_count, offset_slot, rpb_bias_matrix, rpb_gather_index, rpb_offset_index,
    rpb_param_count, slot_offset, RpbTable,
};
