//! Low-rank adapters and their additive merge.
//!
//! Matrices are stored input-major (`y = x·W`), so an adapter on a
//! `rows × cols` tensor carries `A: rows × r` and `B: r × cols` and
//! contributes `A·B`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HolaError, Result};
use crate::model::ModelWeights;
use crate::tensor::{matmul, Tensor};

pub const DEFAULT_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraAdapter {
    pub fn new(target: impl Into<String>, a: Tensor, b: Tensor) -> Result<Self> {
        let target = target.into();
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
            return Err(HolaError::Shape(format!(
                "{target}: A {:?} and B {:?} do not compose",
                a.shape(),
                b.shape()
            )));
        }
        let r = a.cols();
        if r == 0 || r > a.rows().min(b.cols()) {
            return Err(HolaError::Shape(format!(
                "{target}: rank {r} outside 1..={}",
                a.rows().min(b.cols())
            )));
        }
        Ok(Self { target, a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// `ΔW = A·B`.
    pub fn delta(&self) -> Tensor {
        matmul(&self.a, &self.b).expect("checked at construction")
    }

    /// Random adapter with N(0, scale²) entries.
    pub fn random(weights: &ModelWeights, target: &str, rank: usize, scale: f32, seed: u64) -> Result<Self> {
        let t = weights
            .tensor(target)
            .ok_or_else(|| HolaError::Validation(format!("unknown adapter target {target}")))?;
        let (rows, cols) = t.dims2();
        let normal = Normal::new(0.0f32, scale).map_err(|e| HolaError::Domain(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>();
        let a = Tensor::matrix(rows, rank, draw(rows * rank))?;
        let b = Tensor::matrix(rank, cols, draw(rank * cols))?;
        Self::new(target, a, b)
    }
}

/// One rank-`rank` adapter per quantizable matrix, seeded per target.
pub fn random_adapters(weights: &ModelWeights, rank: usize, scale: f32, seed: u64) -> Result<Vec<LoraAdapter>> {
    weights
        .config
        .quantizable_names()
        .iter()
        .enumerate()
        .map(|(i, name)| LoraAdapter::random(weights, name, rank, scale, seed.wrapping_add(i as u64)))
        .collect()
}

/// `W + A·B` for every adapter; the input is left untouched.
pub fn merge_lora(weights: &ModelWeights, adapters: &[LoraAdapter]) -> Result<ModelWeights> {
    let mut seen = HashSet::new();
    for ad in adapters {
        if !seen.insert(ad.target.as_str()) {
            return Err(HolaError::Validation(format!(
                "duplicate adapters on {}",
                ad.target
            )));
        }
        let t = weights
            .tensor(&ad.target)
            .ok_or_else(|| HolaError::Validation(format!("unknown adapter target {}", ad.target)))?;
        if t.rank() != 2 || t.shape() != [ad.a.rows(), ad.b.cols()] {
            return Err(HolaError::Shape(format!(
                "adapter on {} has shape {}×{}, target is {:?}",
                ad.target,
                ad.a.rows(),
                ad.b.cols(),
                t.shape()
            )));
        }
    }
    let mut out = weights.clone();
    for ad in adapters {
        out.tensor_mut(&ad.target)
            .expect("target checked above")
            .add_assign(&ad.delta())?;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterFile {
    version: u32,
    adapters: Vec<AdapterRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterRecord {
    target: String,
    rank: usize,
    rows: usize,
    cols: usize,
    /// base64 of little-endian f32, row-major.
    a: String,
    b: String,
}

fn encode_f32s(v: &[f32]) -> String {
    STANDARD.encode(v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>())
}

fn decode_f32s(s: &str, n: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| HolaError::Format(format!("{what}: {e}")))?;
    if bytes.len() != n * 4 {
        return Err(HolaError::Format(format!(
            "{what}: expected {} bytes, found {}",
            n * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_adapters(adapters: &[LoraAdapter], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = AdapterFile {
        version: 1,
        adapters: adapters
            .iter()
            .map(|ad| AdapterRecord {
                target: ad.target.clone(),
                rank: ad.rank(),
                rows: ad.a.rows(),
                cols: ad.b.cols(),
                a: encode_f32s(ad.a.data()),
                b: encode_f32s(ad.b.data()),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| HolaError::Format(e.to_string()))?;
    fs::write(path, json).map_err(|e| HolaError::io(path, e))
}

pub fn load_adapters(path: impl AsRef<Path>) -> Result<Vec<LoraAdapter>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| HolaError::io(path, e))?;
    let file: AdapterFile =
        serde_json::from_str(&text).map_err(|e| HolaError::Format(format!("adapter file: {e}")))?;
    if file.version != 1 {
        return Err(HolaError::VersionMismatch {
            expected: 1,
            found: file.version,
        });
    }
    file.adapters
        .into_iter()
        .map(|r| {
            let a = decode_f32s(&r.a, r.rows * r.rank, &r.target)?;
            let b = decode_f32s(&r.b, r.rank * r.cols, &r.target)?;
            LoraAdapter::new(
                r.target,
                Tensor::matrix(r.rows, r.rank, a)?,
                Tensor::matrix(r.rank, r.cols, b)?,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> ModelWeights {
        ModelWeights::init_random(
            ModelConfig {
                n_layers: 1,
                d_model: 32,
                n_heads: 2,
                vocab_size: 260,
                max_seq_len: 16,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn unit_rank_one_update() {
        let w = model();
        let mut a = Tensor::zeros(&[32, 1]);
        a.data_mut()[0] = 1.0;
        let mut b = Tensor::zeros(&[1, 32]);
        b.data_mut()[1] = 1.0;
        let merged = merge_lora(&w, &[LoraAdapter::new("layers.0.attn.wq", a, b).unwrap()]).unwrap();
        let (before, after) = (&w.layers[0].wq, &merged.layers[0].wq);
        for i in 0..32 {
            for j in 0..32 {
                let d = after.get(i, j) - before.get(i, j);
                if (i, j) == (0, 1) {
                    assert_eq!(after.get(i, j), before.get(i, j) + 1.0);
                } else {
                    assert_eq!(d, 0.0);
                }
            }
        }
        assert_eq!(merged.layers[0].wk, w.layers[0].wk);
    }

    #[test]
    fn bad_adapters_are_rejected() {
        let w = model();
        let ad = LoraAdapter::random(&w, "layers.0.mlp.up", 4, 0.1, 1).unwrap();
        assert!(matches!(
            merge_lora(&w, &[ad.clone(), ad.clone()]),
            Err(HolaError::Validation(_))
        ));
        let wrong = LoraAdapter { target: "layers.0.mlp.down".into(), ..ad.clone() };
        assert!(matches!(merge_lora(&w, &[wrong]), Err(HolaError::Shape(_))));
        let unknown = LoraAdapter { target: "layers.7.mlp.up".into(), ..ad };
        assert!(matches!(merge_lora(&w, &[unknown]), Err(HolaError::Validation(_))));
        assert!(LoraAdapter::new("x", Tensor::zeros(&[4, 5]), Tensor::zeros(&[5, 4])).is_err());
    }

    #[test]
    fn adapter_file_round_trip() {
        let w = model();
        let ads = random_adapters(&w, 2, 0.05, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("adapters.json");
        save_adapters(&ads, &p).unwrap();
        assert_eq!(load_adapters(&p).unwrap(), ads);
    }
}
