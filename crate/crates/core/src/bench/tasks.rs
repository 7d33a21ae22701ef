use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HolaError, Result};
use crate::model::{tokenize, ModelWeights, TokenId, EOS_ID};
use crate::rag::complexity;

/// Operands are drawn from `0..=MAX_OPERAND`.
pub const MAX_OPERAND: u32 = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub id: String,
    pub prompt: String,
    pub answer: String,
}

impl SyntheticTask {
    pub fn prompt_tokens(&self) -> Vec<TokenId> {
        tokenize(self.prompt.as_bytes())
    }
}

pub fn render_prompt(a: u32, b: u32) -> String {
    format!("Q: {a}+{b}=? A:")
}

/// Inverse of [`render_prompt`].
pub fn parse_prompt(prompt: &str) -> Option<(u32, u32)> {
    let body = prompt.strip_prefix("Q: ")?.strip_suffix("=? A:")?;
    let (a, b) = body.split_once('+')?;
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|c| c.is_ascii_digit());
    if !digits(a) || !digits(b) {
        return None;
    }
    Some((a.parse().ok()?, b.parse().ok()?))
}

pub fn gen_synthetic_tasks(seed: u64, n: usize) -> Vec<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let a = rng.random_range(0..=MAX_OPERAND);
            let b = rng.random_range(0..=MAX_OPERAND);
            SyntheticTask {
                id: format!("task-{i:04}"),
                prompt: render_prompt(a, b),
                answer: (a + b).to_string(),
            }
        })
        .collect()
}

/// Addition facts used as the default retrieval corpus.
pub fn default_corpus() -> Vec<(String, Vec<u8>)> {
    let mut docs = Vec::new();
    for a in 0..=MAX_OPERAND {
        for b in 0..=MAX_OPERAND {
            docs.push((format!("fact-{a}-{b}"), format!("{a}+{b}={}", a + b).into_bytes()));
        }
    }
    docs
}

/// Generated text up to the first newline or end-of-sequence, trimmed.
pub fn extract_answer(tokens: &[TokenId]) -> String {
    let end = tokens
        .iter()
        .position(|&t| t == EOS_ID || t == TokenId::from(b'\n'))
        .unwrap_or(tokens.len());
    let bytes: Vec<u8> = tokens[..end]
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).trim().to_string()
}

/// Decoded text of a generation, with control tokens dropped.
pub fn render_output(tokens: &[TokenId]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(HolaError::Domain("median of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Suggested routing threshold: the median of `C(q)` over `queries`.
pub fn calibrate_delta(weights: &ModelWeights, queries: &[Vec<TokenId>]) -> Result<f64> {
    if queries.len() < 2 {
        return Err(HolaError::Domain(format!(
            "delta calibration needs at least two queries, got {}",
            queries.len()
        )));
    }
    let scores = queries
        .iter()
        .map(|q| complexity(weights, q))
        .collect::<Result<Vec<_>>>()?;
    median(&scores)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}
