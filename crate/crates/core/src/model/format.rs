//! Little-endian checkpoint container.
//!
//! ```text
//! "HOLA"  u32 version  u32×5 config (n_layers, d_model, n_heads, vocab_size, max_seq_len)
//! u32 tensor_count
//! per tensor: u16 name_len, name (UTF-8), u8 rank, u32 dims[rank], payload
//! ```
//!
//! Version 1 payloads are raw f32 data. Version 2 (quantized checkpoints,
//! see `lobi::qmodel`) adds a `u32 block_size` after the config and a `u8`
//! encoding tag before each payload.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::weights::ModelWeights;
use crate::error::{HolaError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"HOLA";
pub const VERSION_DENSE: u32 = 1;
pub const VERSION_QUANTIZED: u32 = 2;

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn header(&mut self, version: u32, cfg: &ModelConfig) {
        self.bytes(&MAGIC);
        self.u32(version);
        for v in [
            cfg.n_layers,
            cfg.d_model,
            cfg.n_heads,
            cfg.vocab_size,
            cfg.max_seq_len,
        ] {
            self.u32(v as u32);
        }
    }

    /// Name, rank and dims of a tensor entry.
    pub fn tensor_head(&mut self, name: &str, shape: &[usize]) {
        self.u16(name.len() as u16);
        self.bytes(name.as_bytes());
        self.u8(shape.len() as u8);
        for &d in shape {
            self.u32(d as u32);
        }
    }

    pub fn f32s(&mut self, data: &[f32]) {
        self.buf.reserve(data.len() * 4);
        for &v in data {
            self.f32(v);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(HolaError::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_bits(self.u32(what)?))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| HolaError::Format("tensor too large".into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Magic, version and config; the version must be `expected`.
    pub fn header(&mut self, expected: u32) -> Result<ModelConfig> {
        let magic = self.take(4, "magic")?;
        if magic != MAGIC {
            return Err(HolaError::BadMagic {
                expected: MAGIC,
                found: [magic[0], magic[1], magic[2], magic[3]],
            });
        }
        let version = self.u32("version")?;
        if version != expected {
            return Err(HolaError::VersionMismatch {
                expected,
                found: version,
            });
        }
        let mut f = [0usize; 5];
        for v in &mut f {
            *v = self.u32("config")? as usize;
        }
        Ok(ModelConfig {
            n_layers: f[0],
            d_model: f[1],
            n_heads: f[2],
            vocab_size: f[3],
            max_seq_len: f[4],
        })
    }

    pub fn tensor_head(&mut self) -> Result<(String, Vec<usize>)> {
        let len = self.u16("name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| HolaError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u8("rank")? as usize;
        if rank == 0 || rank > 2 {
            return Err(HolaError::Format(format!("{name}: unsupported rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        Ok((name, dims))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(HolaError::Format(format!(
                "{} trailing bytes after the tensor table",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Peeks at the version field without validating the rest of the file.
pub fn read_version(bytes: &[u8]) -> Result<u32> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(HolaError::BadMagic {
            expected: MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    r.u32("version")
}

pub fn encode_weights(weights: &ModelWeights) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(VERSION_DENSE, &weights.config);
    let tensors = weights.named_tensors();
    w.u32(tensors.len() as u32);
    for (name, t) in tensors {
        w.tensor_head(&name, t.shape());
        w.f32s(t.data());
    }
    w.finish()
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader::new(bytes);
    let config = r.header(VERSION_DENSE)?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let (name, dims) = r.tensor_head()?;
        let n = dims.iter().product();
        let data = r.f32s(n, &name)?;
        tensors.push((name, Tensor::new(dims, data)?));
    }
    r.finish()?;
    ModelWeights::from_named(config, tensors)
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    weights.audit()?;
    fs::write(path, encode_weights(weights)).map_err(|e| HolaError::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HolaError::io(path, e))?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 32,
            n_heads: 2,
            vocab_size: 260,
            max_seq_len: 8,
        }
    }

    #[test]
    fn encode_decode_encode_is_stable() {
        let w = ModelWeights::init_random(cfg(), 5).unwrap();
        let bytes = encode_weights(&w);
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(encode_weights(&back), bytes);
    }

    #[test]
    fn distinct_errors_for_distinct_corruption() {
        let w = ModelWeights::init_random(cfg(), 5).unwrap();
        let bytes = encode_weights(&w);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad), Err(HolaError::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_weights(&bad),
            Err(HolaError::VersionMismatch { found: 9, .. })
        ));

        assert!(matches!(
            decode_weights(&bytes[..bytes.len() - 3]),
            Err(HolaError::Truncated(_))
        ));
        assert!(matches!(decode_weights(&bytes[..2]), Err(HolaError::Truncated(_))));
    }

    #[test]
    fn narrow_tensor_fails_the_shape_audit() {
        // Header says d_model = 32 but the token embedding is 31 wide.
        let w = ModelWeights::init_random(cfg(), 5).unwrap();
        let mut out = Writer::default();
        out.header(VERSION_DENSE, &w.config);
        let tensors = w.named_tensors();
        out.u32(tensors.len() as u32);
        for (name, t) in tensors {
            if name == "tok_embedding" {
                out.tensor_head(&name, &[260, 31]);
                out.f32s(&vec![0.0; 260 * 31]);
            } else {
                out.tensor_head(&name, t.shape());
                out.f32s(t.data());
            }
        }
        assert!(matches!(
            decode_weights(&out.finish()),
            Err(HolaError::ShapeAudit(_))
        ));
    }
}
