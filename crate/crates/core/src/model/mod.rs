//! The dual-pixel alignment network: configuration, parameters, forward
//! pass and checkpoints.

pub mod checkpoint;
mod config;
mod net;
mod params;

pub use config::{EamContext, LossMode, NetConfig};
pub use net::{predict, ForwardOutputs, Net};
pub use params::{
    encoder_prefix, init_params, param_count, param_specs, validate_store, BoundParams, Init, ParamSpec, ParamStore,
};
