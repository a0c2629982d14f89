//! Windowed multi-head attention: naive and streaming kernels, window
//! partitioning, the cyclic window schedule and the augmented Q/K layout.

mod augmented;
mod config;
mod kernel;
mod schedule;
mod window;

pub use augmented::{
    attend, build_augmented_qk, merge_heads, split_heads, AttnProjections, AugmentedQkv,
    Positional,
};
pub use config::{AttentionConfig, BiasKind, KernelKind, DEFAULT_TILE};
pub use kernel::{
    attend_naive, attend_streaming, naive_backward, streaming_backward, AttentionGrads,
    AttentionStats, KeyMask, NaiveOutput,
};
pub use schedule::{cyclic_schedule, expand_schedule};
pub use window::{window_partition, window_reverse, WindowPlan};
