//! Residual 3D CNN with cluster attention.

mod attention;
mod checkpoint;
mod config;
mod net;

pub use attention::{invert_rows, spatial_attention, AttentionVars};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, OptimizerState,
};
pub use config::{ClusterMaxMode, ModelConfig};
pub use net::{
    architecture_report, count_flops, count_params, param_shapes, residual_block, BlockOutput,
    Forward, LayerRow, Model, Param, ParamMode, FLOP_CONVENTION,
};
