//! Parameterised layers, initialisation and the Adam optimizer.

mod adam;
mod init;
mod layers;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use init::{glorot_limit, glorot_uniform};
pub use layers::{global_avg_pool, ConvLayerParams, FcLayerParams};
pub use params::{BoundParams, ParamStore};
