//! Probabilistic V-Net: prior/posterior encoders, latent sampling, the
//! hierarchical feature-transform generator and the modulated backbone.

mod config;
mod forward;
mod params;

pub use config::{Encoder, LayerDef, ModelConfig, ENCODER_CONVS, LEVELS};
pub use forward::{
    argmax_channels, encode, forward_infer, forward_train, hsft_generate, modulate, one_hot,
    sample_latent, vnet_forward, Gaussian, InferMode, Inference, Modulation, Sampling,
    TrainForward, LOGVAR_MAX, LOGVAR_MIN,
};
pub use params::{Ctx, ModelParams};
