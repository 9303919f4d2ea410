//! The pose-lifting network: configuration, parameters, forward pass, and
//! checkpoint persistence.

mod checkpoint;
mod config;
mod net;
mod params;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, load_checkpoint_for, save_checkpoint,
};
pub use config::{ModelConfig, PredictionScheme};
pub use net::{
    build_forward, forward, forward_eval, AttentionRecord, BuiltForward, ForwardOptions,
    ForwardOutput,
};
pub use params::{param_specs, InitKind, ModelParameters, ParamEntry, ParamSpec};
