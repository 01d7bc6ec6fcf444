//! Encoder-decoder backbone with plugin-aware encoder attention.

pub mod attention;
mod backbone;
mod checkpoint;
mod config;
mod params;

pub use backbone::{argmax, map_rows, Backbone, Ctx, DecodeState, LayerPrefixes, Trainable};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{ModelConfig, PluginSharing, MAX_DOC_LEN, MAX_QUERY_LEN, MAX_TARGET_LEN};
pub use params::{
    attn_names, init_params, is_adapter_param, is_mapping_param, mapping_names, ParamSet,
};
