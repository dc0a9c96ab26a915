//! Low-rank adapters over frozen weights and blockwise 4-bit quantization.

pub mod lora;
pub mod quant;

pub use lora::{
    adapted_linear, adapter_forward, attach_adapters, default_targets, merge_adapter, AdapterSet,
    BaseWeight, LoraAdapter,
};
pub use quant::{
    build_codebook, dequantize, quantize_blockwise, Codebook, CodebookKind, QuantizedTensor,
    DEFAULT_BLOCK_SIZE,
};
