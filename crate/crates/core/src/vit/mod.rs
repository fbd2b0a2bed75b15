//! ViT-B/16 compatible model: configuration, weights, preprocessing and the
//! capturing forward/backward pass.
//!
//! Parameter names follow the common `timm` layout (`blocks.{l}.attn.qkv.weight`,
//! `head.weight`, ...) with linear weights stored `[out, in]` and the patch
//! embedding stored as a convolution kernel `[D, 3, p, p]`.

mod config;
mod model;
mod preprocess;
mod weights;

pub use config::ViTConfig;
pub use model::{predicted_class, AttentionOffset, CaptureSet, Vit};
pub use preprocess::{preprocess, Normalization, Raster, ResizeTransform};
pub use weights::{
    load_weights, parse_vtw, read_vtw, to_vtw_bytes, write_vtw, ManifestEntry, WeightStore, ALIGN,
    MAGIC,
};
