//! Fusion modules and the end-to-end network.
//!
//! Two encoders feed the fusion modules: residual mesh convolutions on the
//! face colours, and a stride-2 image conv stack whose aligned feature maps
//! are resampled onto the mesh. A UNet-style mesh decoder concatenates the
//! fused features as skips and emits one positive distance map per level.

mod config;
mod fusion;
mod model;
mod train;

pub use config::{FusionVariant, NetworkConfig};
pub use fusion::{fuse, gate_fuse, init_fusion, FusionKind, FusionVars, Gates};
pub use model::{
    decode, fused_features, image_encoder_forward, init_parameters, mesh_encoder_forward,
    pooled_targets, sphere_fusion_forward, NetworkInput, NetworkResources,
};
pub use train::{network_loss, Trainer, TrainingSample};
