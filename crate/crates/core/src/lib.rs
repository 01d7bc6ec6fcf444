//! Plug-and-play document modules for encoder-decoder transformers.

pub mod adapt;
pub mod cost;
mod error;
pub mod fsutil;
pub mod kv;
pub mod model;
pub mod plugin;
pub mod pretrain;
pub mod store;
pub mod taskbench;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
