//! Dual-stream network: an RGB trunk and a frequency-decomposition trunk,
//! attention taps over their fused stage features, a 14x14 pixel-wise head and
//! a fully connected binary head.

mod backbone;
mod model;

pub use backbone::{
    Backbone, BackboneCache, BackboneKind, BackboneSpec, Bottleneck, ConvBn, ResNet50, TinyBackbone,
};
pub use model::{
    fuse_stage, predict_video, predict_video_with, ForwardOutput, LmfdModel, ModelCache,
    ModelConfig, Prediction, VideoScore,
};
