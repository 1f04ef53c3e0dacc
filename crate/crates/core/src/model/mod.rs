//! Architectures, driven by one [`AblationConfig`].

mod config;
mod forward;
mod spec;

pub use config::{AblationConfig, ArchFamily, LossKind, ReconstructionKind, RoutingKind, KERNEL_SIZES, PRESETS};
pub use forward::{Forward, Inference, LossParts, ScoreKind, Targets};
pub use spec::{
    build_model, convnet_fc_lk, count_params, fit_fc_widths, human_count, LayerDesc, ModelSpec, ParamDesc,
    DECODER_HIDDEN, TRANSFORM_NAME,
};
