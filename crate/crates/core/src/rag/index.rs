//! Document index and its JSON-lines file.
//!
//! ```text
//! {"dim": 128, "version": 1}
//! {"id": "doc-0", "text": "<base64>", "embedding": "<base64 of LE f32>"}
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{HolaError, Result};
use crate::model::{hidden_states, ModelWeights, TokenId};
use crate::tensor::l2_norm;

const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DocEntry {
    pub id: String,
    pub text: Vec<u8>,
    pub embedding: Vec<f32>,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocIndex {
    dim: usize,
    entries: Vec<DocEntry>,
    by_id: HashMap<String, usize>,
}

impl DocIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DocEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&DocEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    pub fn insert(&mut self, id: String, text: Vec<u8>, embedding: Vec<f32>) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(HolaError::Shape(format!(
                "doc {id}: embedding has {} entries, index dimension is {}",
                embedding.len(),
                self.dim
            )));
        }
        if self.by_id.contains_key(&id) {
            return Err(HolaError::Validation(format!("duplicate doc id {id}")));
        }
        let norm = l2_norm(&embedding);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(HolaError::Validation(format!(
                "doc {id}: embedding norm {norm} is not positive"
            )));
        }
        self.by_id.insert(id.clone(), self.entries.len());
        self.entries.push(DocEntry {
            id,
            text,
            embedding,
            norm,
        });
        Ok(())
    }
}

pub(crate) fn cosine_with_norms(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity, accumulated in f64 and clamped to [-1, 1].
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    cosine_with_norms(a, b, l2_norm(a), l2_norm(b))
}

/// Mean of the final hidden states over the (at most `max_seq_len`) leading tokens.
pub fn mean_pooled_embedding(weights: &ModelWeights, ids: &[TokenId]) -> Result<Vec<f32>> {
    let ids = &ids[..ids.len().min(weights.config.max_seq_len)];
    let h = hidden_states(weights, ids)?;
    let (n, d) = h.dims2();
    Ok((0..d)
        .map(|j| ((0..n).map(|t| f64::from(h.get(t, j))).sum::<f64>() / n as f64) as f32)
        .collect())
}

pub fn build_index(weights: &ModelWeights, docs: &[(String, Vec<u8>)]) -> Result<DocIndex> {
    if docs.is_empty() {
        return Err(HolaError::Validation("no documents to index".into()));
    }
    let mut index = DocIndex::new(weights.config.d_model);
    for (id, text) in docs {
        if text.is_empty() {
            return Err(HolaError::Validation(format!("doc {id} is empty")));
        }
        let ids: Vec<TokenId> = text.iter().map(|&b| TokenId::from(b)).collect();
        let embedding = mean_pooled_embedding(weights, &ids)?;
        index.insert(id.clone(), text.clone(), embedding)?;
    }
    Ok(index)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dim: usize,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    text: String,
    embedding: String,
}

fn f32s_to_base64(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn base64_to_f32s(s: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| HolaError::Format(format!("embedding: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(HolaError::Format("embedding length is not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain structs serialize")
}

pub fn save_index(index: &DocIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| HolaError::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let header = Header {
        dim: index.dim,
        version: INDEX_VERSION,
    };
    writeln!(out, "{}", json(&header)).map_err(io)?;
    for e in &index.entries {
        let rec = Record {
            id: e.id.clone(),
            text: STANDARD.encode(&e.text),
            embedding: f32s_to_base64(&e.embedding),
        };
        writeln!(out, "{}", json(&rec)).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn load_index(path: impl AsRef<Path>) -> Result<DocIndex> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| HolaError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| HolaError::Truncated("index file has no header".into()))?
        .map_err(|e| HolaError::io(path, e))?;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| HolaError::Format(format!("index header: {e}")))?;
    if header.version != INDEX_VERSION {
        return Err(HolaError::VersionMismatch {
            expected: INDEX_VERSION,
            found: header.version,
        });
    }
    let mut index = DocIndex::new(header.dim);
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| HolaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| HolaError::Format(format!("index line {}: {e}", n + 2)))?;
        let text = STANDARD
            .decode(&rec.text)
            .map_err(|e| HolaError::Format(format!("doc {}: text: {e}", rec.id)))?;
        index.insert(rec.id, text, base64_to_f32s(&rec.embedding)?)?;
    }
    Ok(index)
}
