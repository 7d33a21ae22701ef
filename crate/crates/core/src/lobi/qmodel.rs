//! Block-quantized checkpoints.
//!
//! Version-2 files extend the dense layout with a `u32 block_size` after
//! the config and a `u8` encoding tag per tensor: `0` for raw f32, `1` for a
//! block stream of `u8 bits, f32 scale, packed codes` per block.

use std::fs;
use std::path::Path;

use super::map::PrecisionMap;
use crate::error::{HolaError, Result};
use crate::model::format::{Reader, Writer, VERSION_QUANTIZED};
use crate::model::{forward, ModelConfig, ModelWeights, TokenId};
use crate::quant::{check_block_size, dequantize_block, quantize_block_sized, Precision, QuantBlock};
use crate::tensor::Tensor;

const TAG_DENSE: u8 = 0;
const TAG_BLOCKS: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum QTensor {
    Dense(Tensor),
    Blocks { shape: Vec<usize>, blocks: Vec<QuantBlock> },
}

impl QTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            QTensor::Dense(t) => t.shape(),
            QTensor::Blocks { shape, .. } => shape,
        }
    }

    pub fn bytes(&self) -> usize {
        match self {
            QTensor::Dense(t) => t.len() * std::mem::size_of::<f32>(),
            QTensor::Blocks { blocks, .. } => blocks.iter().map(QuantBlock::packed_bytes).sum(),
        }
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        match self {
            QTensor::Dense(t) => Ok(t.clone()),
            QTensor::Blocks { shape, blocks } => {
                let mut data = Vec::with_capacity(shape.iter().product());
                for b in blocks {
                    data.extend(dequantize_block(b)?);
                }
                Tensor::new(shape.clone(), data)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub block_size: usize,
    pub tensors: Vec<(String, QTensor)>,
}

impl QuantizedModel {
    /// In-memory size: packed blocks plus scales, and f32 for dense tensors.
    pub fn packed_bytes(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.bytes()).sum()
    }

    /// Packed size of the block-quantized tensors alone.
    pub fn quantized_payload_bytes(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(_, t)| matches!(t, QTensor::Blocks { .. }))
            .map(|(_, t)| t.bytes())
            .sum()
    }

    /// f32 size of the tensors that are block-quantized here.
    pub fn dense_payload_bytes(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(_, t)| matches!(t, QTensor::Blocks { .. }))
            .map(|(_, t)| t.shape().iter().product::<usize>() * std::mem::size_of::<f32>())
            .sum()
    }

    pub fn dequantize(&self) -> Result<ModelWeights> {
        let tensors = self
            .tensors
            .iter()
            .map(|(n, t)| Ok((n.clone(), t.dequantize()?)))
            .collect::<Result<Vec<_>>>()?;
        ModelWeights::from_named(self.config, tensors)
    }
}

pub fn quantize_model(weights: &ModelWeights, map: &PrecisionMap) -> Result<QuantizedModel> {
    let block_size = map.validate_for(weights)?;
    let tensors = weights
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let q = match map.get(&name) {
                None => QTensor::Dense(t.clone()),
                Some(tp) => QTensor::Blocks {
                    shape: t.shape().to_vec(),
                    blocks: t
                        .data()
                        .chunks(block_size)
                        .zip(&tp.precisions)
                        .map(|(chunk, &p)| quantize_block_sized(chunk, p, block_size))
                        .collect::<Result<_>>()?,
                },
            };
            Ok((name, q))
        })
        .collect::<Result<_>>()?;
    Ok(QuantizedModel {
        config: weights.config,
        block_size,
        tensors,
    })
}

/// Dequantizes and runs the standard forward pass.
pub fn quantized_forward(qmodel: &QuantizedModel, ids: &[TokenId]) -> Result<Tensor> {
    forward(&qmodel.dequantize()?, ids)
}

pub fn encode_quantized(qmodel: &QuantizedModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(VERSION_QUANTIZED, &qmodel.config);
    w.u32(qmodel.block_size as u32);
    w.u32(qmodel.tensors.len() as u32);
    for (name, t) in &qmodel.tensors {
        w.tensor_head(name, t.shape());
        match t {
            QTensor::Dense(t) => {
                w.u8(TAG_DENSE);
                w.f32s(t.data());
            }
            QTensor::Blocks { blocks, .. } => {
                w.u8(TAG_BLOCKS);
                for b in blocks {
                    w.u8(b.precision.bits());
                    w.f32(b.scale);
                    w.bytes(&b.packed);
                }
            }
        }
    }
    w.finish()
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = Reader::new(bytes);
    let config = r.header(VERSION_QUANTIZED)?;
    let block_size = r.u32("block size")? as usize;
    check_block_size(block_size).map_err(|_| HolaError::Format(format!("bad block size {block_size}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let (name, dims) = r.tensor_head()?;
        let len: usize = dims.iter().product();
        let t = match r.u8("encoding tag")? {
            TAG_DENSE => QTensor::Dense(Tensor::new(dims, r.f32s(len, &name)?)?),
            TAG_BLOCKS => {
                let n_blocks = len.div_ceil(block_size);
                let mut blocks = Vec::with_capacity(n_blocks);
                for i in 0..n_blocks {
                    let precision = Precision::from_bits(r.u8("block precision")?)
                        .map_err(|e| HolaError::Format(format!("{name} block {i}: {e}")))?;
                    let scale = r.f32("block scale")?;
                    let packed = r.take(precision.packed_len(block_size), "packed codes")?.to_vec();
                    let block = QuantBlock {
                        precision,
                        scale,
                        packed,
                        original_count: block_size.min(len - i * block_size),
                        block_size,
                    };
                    block.validate()?;
                    blocks.push(block);
                }
                QTensor::Blocks { shape: dims, blocks }
            }
            other => return Err(HolaError::Format(format!("{name}: unknown encoding tag {other}"))),
        };
        tensors.push((name, t));
    }
    r.finish()?;
    let qmodel = QuantizedModel {
        config,
        block_size,
        tensors,
    };
    // shape audit through the dense view
    qmodel.dequantize()?;
    Ok(qmodel)
}

pub fn save_quantized(qmodel: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_quantized(qmodel)).map_err(|e| HolaError::io(path, e))
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let path = path.as_ref();
    decode_quantized(&fs::read(path).map_err(|e| HolaError::io(path, e))?)
}

/// Loads dense or quantized checkpoints alike, as dense weights.
pub fn load_any_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HolaError::io(path, e))?;
    match crate::model::format::read_version(&bytes)? {
        VERSION_QUANTIZED => decode_quantized(&bytes)?.dequantize(),
        _ => crate::model::format::decode_weights(&bytes),
    }
}
