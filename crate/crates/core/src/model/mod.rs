//! The box-promptable segmenter: ViT image encoder, Fourier box-prompt
//! encoder and a two-layer two-way mask decoder.

mod checkpoint;
mod config;
mod init;
mod net;
mod prompt;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use config::ModelConfig;
pub use init::{init_params, param_specs, Init, ParamSpec, FOURIER_B};
pub use net::{
    decode_masks, embed_patches, encode_image, forward, image_embedding, patchify, predict,
};
pub use prompt::{
    dense_positional_encoding, encode_box_prompt, fourier_point_encoding, BoundingBox,
    FOURIER_LAYOUT,
};
