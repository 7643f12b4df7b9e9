//! Conv-Transformer audio encoder.

pub mod attention;
pub mod config;
pub mod lookahead;
pub mod network;
pub mod stream;

pub use config::{
    BlockSpec, ConvKind, ConvLayerSpec, Dims, EncoderConfig, TransformerLayerSpec, PRESETS,
};
pub use lookahead::{layer_fields, lookahead, output_length, LayerField, LayerKind, Lookahead};
pub use network::{encode_offline, init_encoder};
pub use stream::{encode_stream, StreamChunk, StreamState};
