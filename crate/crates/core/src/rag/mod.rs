//! Adaptive retrieval: gradient-norm complexity routing, dense top-k
//! retrieval over a [`DocIndex`], context assembly and compositional
//! attention.

mod attention;
mod index;

pub use attention::{attention, compositional_attention};
pub use index::{build_index, cosine, load_index, mean_pooled_embedding, save_index, DocEntry, DocIndex};

use serde::{Deserialize, Serialize};

use crate::error::{HolaError, Result};
use crate::model::{embedding_gradient, ModelWeights, TokenId, SEP_ID};

pub const DEFAULT_DELTA: f64 = 0.85;
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub complexity: f64,
    /// Retrieved doc ids in descending score order.
    pub retrieved: Vec<String>,
    pub scores: Vec<f64>,
    pub augmented_length: usize,
}

/// `C(q) = ‖∂L/∂q‖₂` on `weights`.
pub fn complexity(weights: &ModelWeights, query: &[TokenId]) -> Result<f64> {
    Ok(embedding_gradient(weights, query)?.l2_norm())
}

/// The `k` best entries by cosine similarity, descending, ties broken by
/// ascending id.
pub fn retrieve_topk(index: &DocIndex, query_embedding: &[f32], k: usize) -> Result<Vec<(String, f64)>> {
    if index.is_empty() {
        return Err(HolaError::Routing("document index is empty".into()));
    }
    if k == 0 {
        return Err(HolaError::Domain("top-k needs k >= 1".into()));
    }
    if query_embedding.len() != index.dim() {
        return Err(HolaError::Shape(format!(
            "query embedding has {} entries, index dimension is {}",
            query_embedding.len(),
            index.dim()
        )));
    }
    let qnorm = crate::tensor::l2_norm(query_embedding);
    if qnorm == 0.0 {
        return Err(HolaError::Domain("query embedding is zero".into()));
    }
    let mut scored: Vec<(&str, f64)> = index
        .entries()
        .iter()
        .map(|e| (e.id.as_str(), index::cosine_with_norms(query_embedding, &e.embedding, qnorm, e.norm)))
        .collect();
    let order = |a: &(&str, f64), b: &(&str, f64)| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(scored.into_iter().map(|(id, s)| (id.to_string(), s)).collect())
}

/// Routes `query` and assembles `x′`, bounded by the model's `max_seq_len`.
pub fn route_and_augment(
    weights: &ModelWeights,
    index: &DocIndex,
    query: &[TokenId],
    delta: f64,
    k: usize,
) -> Result<(Vec<TokenId>, RoutingDecision)> {
    route_and_augment_within(weights, index, query, delta, k, weights.config.max_seq_len)
}

/// As [`route_and_augment`] with an explicit token budget for `x′`, so
/// callers can reserve room for generation.
pub fn route_and_augment_within(
    weights: &ModelWeights,
    index: &DocIndex,
    query: &[TokenId],
    delta: f64,
    k: usize,
    budget: usize,
) -> Result<(Vec<TokenId>, RoutingDecision)> {
    if delta.is_nan() || delta < 0.0 {
        return Err(HolaError::Config(format!("delta must be >= 0, got {delta}")));
    }
    let budget = budget.min(weights.config.max_seq_len);
    if query.len() > budget {
        return Err(HolaError::Capacity(format!(
            "query of {} tokens exceeds the context budget of {budget}",
            query.len()
        )));
    }
    let c = complexity(weights, query)?;
    let mut x = query.to_vec();
    let mut decision = RoutingDecision {
        complexity: c,
        retrieved: Vec::new(),
        scores: Vec::new(),
        augmented_length: 0,
    };
    if c >= delta {
        let q = mean_pooled_embedding(weights, query)?;
        let hits = retrieve_topk(index, &q, k)?;
        for (id, score) in hits {
            let entry = index.get(&id).expect("hit comes from the index");
            x.push(SEP_ID);
            x.extend(entry.text.iter().map(|&b| TokenId::from(b)));
            decision.retrieved.push(id);
            decision.scores.push(score);
        }
        x.truncate(budget);
    }
    decision.augmented_length = x.len();
    Ok((x, decision))
}
