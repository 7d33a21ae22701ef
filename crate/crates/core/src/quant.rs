//! Symmetric per-block linear quantization at 4, 8 or 16 bits.
//!
//! A block covers `block_size` consecutive weights (32 by default). Codes are
//! signed integers stored little-endian; 4-bit codes are packed two per byte,
//! low nibble first. Tail blocks are padded with zero codes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{HolaError, Result};

pub const BLOCK_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Precision {
    Int4,
    Int8,
    Int16,
}

impl Precision {
    /// Candidate set, narrowest first.
    pub const ALL: [Precision; 3] = [Precision::Int4, Precision::Int8, Precision::Int16];

    pub fn bits(self) -> u8 {
        match self {
            Precision::Int4 => 4,
            Precision::Int8 => 8,
            Precision::Int16 => 16,
        }
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            4 => Ok(Precision::Int4),
            8 => Ok(Precision::Int8),
            16 => Ok(Precision::Int16),
            other => Err(HolaError::Domain(format!(
                "precision must be 4, 8 or 16 bits, got {other}"
            ))),
        }
    }

    /// Largest representable code magnitude, `2^(bits-1) - 1`.
    pub fn qmax(self) -> i32 {
        (1i32 << (self.bits() - 1)) - 1
    }

    fn qmin(self) -> i32 {
        -(1i32 << (self.bits() - 1))
    }

    /// Bytes of packed codes for a block of `block_size` weights.
    pub fn packed_len(self, block_size: usize) -> usize {
        (block_size * self.bits() as usize).div_ceil(8)
    }
}

impl TryFrom<u8> for Precision {
    type Error = HolaError;

    fn try_from(bits: u8) -> Result<Self> {
        Precision::from_bits(bits)
    }
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        p.bits()
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

pub fn check_block_size(block_size: usize) -> Result<()> {
    if block_size == 0 || !block_size.is_multiple_of(2) {
        return Err(HolaError::Config(format!(
            "block size must be a positive even number, got {block_size}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantBlock {
    pub precision: Precision,
    pub scale: f32,
    pub packed: Vec<u8>,
    pub original_count: usize,
    pub block_size: usize,
}

impl QuantBlock {
    /// In-memory footprint: packed codes plus the f32 scale.
    pub fn packed_bytes(&self) -> usize {
        self.packed.len() + std::mem::size_of::<f32>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.original_count > self.block_size {
            return Err(HolaError::Format(format!(
                "block holds {} weights but capacity is {}",
                self.original_count, self.block_size
            )));
        }
        let expected = self.precision.packed_len(self.block_size);
        if self.packed.len() != expected {
            return Err(HolaError::Format(format!(
                "{}-bit block of {} needs {} packed bytes, found {}",
                self.precision,
                self.block_size,
                expected,
                self.packed.len()
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(HolaError::Format(format!(
                "block scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Signed codes for the valid weights.
    pub fn codes(&self) -> Result<Vec<i32>> {
        self.validate()?;
        Ok(unpack(&self.packed, self.precision, self.original_count))
    }
}

fn pack(codes: &[i32], precision: Precision, block_size: usize) -> Vec<u8> {
    let mut out = vec![0u8; precision.packed_len(block_size)];
    match precision {
        Precision::Int4 => {
            for (i, &c) in codes.iter().enumerate() {
                let nibble = (c as u8) & 0x0F;
                out[i / 2] |= if i % 2 == 0 { nibble } else { nibble << 4 };
            }
        }
        Precision::Int8 => {
            for (o, &c) in out.iter_mut().zip(codes) {
                *o = c as i8 as u8;
            }
        }
        Precision::Int16 => {
            for (chunk, &c) in out.chunks_exact_mut(2).zip(codes) {
                chunk.copy_from_slice(&(c as i16).to_le_bytes());
            }
        }
    }
    out
}

fn unpack(packed: &[u8], precision: Precision, count: usize) -> Vec<i32> {
    match precision {
        Precision::Int4 => (0..count)
            .map(|i| {
                let byte = packed[i / 2];
                let nibble = if i % 2 == 0 { byte & 0x0F } else { byte >> 4 };
                // sign-extend the low four bits
                (((nibble << 4) as i8) >> 4) as i32
            })
            .collect(),
        Precision::Int8 => packed[..count].iter().map(|&b| b as i8 as i32).collect(),
        Precision::Int16 => packed
            .chunks_exact(2)
            .take(count)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
            .collect(),
    }
}

pub fn quantize_block(weights: &[f32], precision: Precision) -> Result<QuantBlock> {
    quantize_block_sized(weights, precision, BLOCK_SIZE)
}

pub fn quantize_block_sized(
    weights: &[f32],
    precision: Precision,
    block_size: usize,
) -> Result<QuantBlock> {
    check_block_size(block_size)?;
    if weights.len() > block_size {
        return Err(HolaError::Shape(format!(
            "{} weights do not fit a block of {}",
            weights.len(),
            block_size
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(HolaError::Numeric("cannot quantize non-finite weights".into()));
    }
    let max_abs = weights.iter().fold(0.0f32, |m, w| m.max(w.abs()));
    let (scale, codes) = if max_abs == 0.0 {
        (1.0, vec![0; weights.len()])
    } else {
        let scale = max_abs / precision.qmax() as f32;
        let codes = weights
            .iter()
            .map(|&w| ((w / scale).round() as i32).clamp(precision.qmin(), precision.qmax()))
            .collect();
        (scale, codes)
    };
    Ok(QuantBlock {
        precision,
        scale,
        packed: pack(&codes, precision, block_size),
        original_count: weights.len(),
        block_size,
    })
}

pub fn dequantize_block(block: &QuantBlock) -> Result<Vec<f32>> {
    let scale = block.scale;
    Ok(block
        .codes()?
        .into_iter()
        .map(|c| c as f32 * scale)
        .collect())
}
