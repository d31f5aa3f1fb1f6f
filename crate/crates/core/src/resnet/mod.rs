//! The residual patch classifier: parameter containers, the network
//! builder with its forward/backward passes, and the checkpoint container.

pub mod checkpoint;
pub mod network;
pub mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use network::{
    backward, backward_from, build, finite_difference_check, forward_eval, forward_eval_traced,
    forward_train, stage_extents, NetworkConfig, ShapeTrace, TrainCache, BN_MOMENTUM,
};
pub use params::{GradSet, LayerParams, LayerPath, ParameterSet};
