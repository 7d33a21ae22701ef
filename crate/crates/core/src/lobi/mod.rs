//! Lo-Bi: LoRA merging and calibration-driven per-block mixed precision.

mod lora;
mod map;
mod qmodel;
mod sensitivity;

pub use lora::{load_adapters, merge_lora, random_adapters, save_adapters, LoraAdapter, DEFAULT_RANK};
pub use map::{assign_precisions, AssignOptions, PrecisionMap, TensorPrecisions};
pub use qmodel::{
    decode_quantized, encode_quantized, load_any_weights, load_quantized, quantize_model, quantized_forward, save_quantized,
    QTensor, QuantizedModel,
};
pub use sensitivity::{
    block_error, block_error_sized, logit_distance, CalibrationSet, Sensitivity, DEFAULT_CALIB_SIZE,
};
