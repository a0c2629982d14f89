//! SST-micro building blocks: convolutions, the gated attention layer,
//! ConvFFN, residual blocks and the full network.

pub mod config;
pub mod conv;
mod layer;
mod model;
mod params;

pub use config::{GateKind, KeyValues, SstConfig, MODEL_KEYS};
pub use layer::{
    cla_gate, conv3x3_on_tape, conv_ffn, dense, gate_map, init_layer_params, sst_layer,
    window_attention, ForwardOptions, LayerSpec, WindowHeads, LN_EPS,
};
pub use model::{layer_prefix, sst_block, sst_forward, SstModel, CONFIG_FILE};
pub use params::{BoundParams, ParamStore};
