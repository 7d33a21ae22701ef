//! Hierarchical speculative decoding.
//!
//! The draft model proposes each token greedily. A proposal whose draft
//! distribution has entropy below `tau` (nats) is kept as is; otherwise the
//! verifier picks the token from the accepted prefix. There is no rollback:
//! after a substitution the draft simply continues from the corrected prefix.
//!
//! With `draft_chunk > 1` the draft runs ahead several tokens per burst.
//! Proposals after a substituted token are discarded, so the output does not
//! depend on the chunk size; only `draft_calls` does.

use std::io::{BufRead, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{HolaError, Result};
use crate::model::{last_logits, ModelWeights, TokenId, EOS_ID};
use crate::tensor::{argmax, entropy, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsdConfig {
    /// Entropy threshold in nats.
    pub tau: f64,
    pub max_tokens: usize,
    pub draft_chunk: usize,
}

impl HsdConfig {
    pub const DEFAULT_TAU: f64 = 1.5;

    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(HolaError::Config(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.max_tokens == 0 || self.draft_chunk == 0 {
            return Err(HolaError::Config(
                "max_tokens and draft_chunk must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for HsdConfig {
    fn default() -> Self {
        Self {
            tau: Self::DEFAULT_TAU,
            max_tokens: 32,
            draft_chunk: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accepted,
    Verified,
}

/// One emitted token; serializes as a JSON line `{t, token, entropy, decision, micros}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRecord {
    pub t: usize,
    pub token: TokenId,
    pub entropy: f64,
    pub decision: Decision,
    pub micros: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeTrace {
    pub records: Vec<TokenRecord>,
    pub draft_calls: usize,
    pub verifier_calls: usize,
    pub accepted_count: usize,
}

impl DecodeTrace {
    pub fn emitted(&self) -> usize {
        self.records.len()
    }

    pub fn verified_count(&self) -> usize {
        self.emitted() - self.accepted_count
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.records.iter().map(|r| r.token).collect()
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.entropy).collect()
    }

    pub fn total_micros(&self) -> u64 {
        self.records.iter().map(|r| r.micros).sum()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.accepted_count as f64 / self.emitted() as f64
        }
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| HolaError::Format(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| HolaError::io("<trace>", e))?;
        }
        Ok(())
    }

    /// Reads per-token records back. Call counters are not part of the
    /// line format; `verifier_calls` is rebuilt from the decisions.
    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut trace = DecodeTrace::default();
        for line in input.lines() {
            let line = line.map_err(|e| HolaError::io("<trace>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: TokenRecord =
                serde_json::from_str(&line).map_err(|e| HolaError::Format(e.to_string()))?;
            match r.decision {
                Decision::Accepted => trace.accepted_count += 1,
                Decision::Verified => trace.verifier_calls += 1,
            }
            trace.records.push(r);
        }
        Ok(trace)
    }
}

fn gate_entropy(h: f64, tau: f64) -> bool {
    h < tau
}

/// `true` iff the entropy of `dist` is strictly below `tau`.
pub fn gate(dist: &[f32], tau: f64) -> Result<bool> {
    Ok(gate_entropy(entropy(dist)?, tau))
}

fn check_capacity(models: &[&ModelWeights], prompt: &[TokenId], max_tokens: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(HolaError::Domain("decode needs a nonempty prompt".into()));
    }
    for m in models {
        let limit = m.config.max_seq_len;
        if prompt.len() + max_tokens > limit {
            return Err(HolaError::Capacity(format!(
                "prompt of {} plus {} new tokens exceeds max_seq_len {}",
                prompt.len(),
                max_tokens,
                limit
            )));
        }
    }
    Ok(())
}

struct Proposal {
    token: TokenId,
    entropy: f64,
    micros: u64,
}

fn propose(draft: &ModelWeights, ctx: &[TokenId]) -> Result<Proposal> {
    let start = Instant::now();
    let probs = softmax(&last_logits(draft, ctx)?, 1.0)?;
    let h = entropy(&probs)?;
    Ok(Proposal {
        token: argmax(&probs) as TokenId,
        entropy: h,
        micros: start.elapsed().as_micros() as u64,
    })
}

/// Entropy-gated decoding. Returns the generated tokens (prompt excluded)
/// and the per-token trace.
pub fn decode(
    draft: &ModelWeights,
    verifier: &ModelWeights,
    prompt: &[TokenId],
    cfg: &HsdConfig,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    cfg.validate()?;
    if draft.config.vocab_size != verifier.config.vocab_size {
        return Err(HolaError::Validation(format!(
            "draft vocabulary {} differs from verifier vocabulary {}",
            draft.config.vocab_size, verifier.config.vocab_size
        )));
    }
    check_capacity(&[draft, verifier], prompt, cfg.max_tokens)?;

    let mut seq = prompt.to_vec();
    let mut trace = DecodeTrace::default();
    let mut done = false;
    while !done && trace.emitted() < cfg.max_tokens {
        let burst = cfg.draft_chunk.min(cfg.max_tokens - trace.emitted());
        let mut ctx = seq.clone();
        let mut proposals = Vec::with_capacity(burst);
        for _ in 0..burst {
            let p = propose(draft, &ctx)?;
            trace.draft_calls += 1;
            ctx.push(p.token);
            let eos = p.token == EOS_ID;
            proposals.push(p);
            if eos {
                break;
            }
        }

        for p in proposals {
            let t = trace.emitted();
            let (token, decision, micros) = if gate_entropy(p.entropy, cfg.tau) {
                trace.accepted_count += 1;
                (p.token, Decision::Accepted, p.micros)
            } else {
                let start = Instant::now();
                let token = argmax(&last_logits(verifier, &seq)?) as TokenId;
                trace.verifier_calls += 1;
                let micros = p.micros + start.elapsed().as_micros() as u64;
                (token, Decision::Verified, micros)
            };
            seq.push(token);
            trace.records.push(TokenRecord {
                t,
                token,
                entropy: p.entropy,
                decision,
                micros,
            });
            if token == EOS_ID {
                done = true;
                break;
            }
            if token != p.token {
                // later proposals were conditioned on the rejected token
                break;
            }
        }
    }
    let out = seq[prompt.len()..].to_vec();
    Ok((out, trace))
}

/// Plain greedy decoding with a single model.
pub fn greedy_decode(
    model: &ModelWeights,
    prompt: &[TokenId],
    max_tokens: usize,
) -> Result<Vec<TokenId>> {
    Ok(single_model_decode(model, prompt, max_tokens)?.0)
}

/// Verifier-only greedy decoding, traced like [`decode`]: every token is a
/// verifier call and no draft calls are made. Entropies are those of the
/// verifier's own distribution.
pub fn decode_verifier_only(
    verifier: &ModelWeights,
    prompt: &[TokenId],
    max_tokens: usize,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    single_model_decode(verifier, prompt, max_tokens)
}

fn single_model_decode(
    model: &ModelWeights,
    prompt: &[TokenId],
    max_tokens: usize,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    if max_tokens == 0 {
        return Err(HolaError::Config("max_tokens must be at least 1".into()));
    }
    check_capacity(&[model], prompt, max_tokens)?;
    let mut seq = prompt.to_vec();
    let mut trace = DecodeTrace::default();
    for t in 0..max_tokens {
        let start = Instant::now();
        let probs = softmax(&last_logits(model, &seq)?, 1.0)?;
        let token = argmax(&probs) as TokenId;
        let h = entropy(&probs)?;
        trace.verifier_calls += 1;
        seq.push(token);
        trace.records.push(TokenRecord {
            t,
            token,
            entropy: h,
            decision: Decision::Verified,
            micros: start.elapsed().as_micros() as u64,
        });
        if token == EOS_ID {
            break;
        }
    }
    Ok((seq[prompt.len()..].to_vec(), trace))
}

/// Modeled speedup against verifier-only decoding:
/// `T·c_ver / (T·c_draft + verifier_calls·c_ver)`.
pub fn speedup_report(trace: &DecodeTrace, cost_draft: f64, cost_verifier: f64) -> Result<f64> {
    modeled_speedup(trace.emitted(), trace.verifier_calls, cost_draft, cost_verifier)
}

pub fn modeled_speedup(
    tokens: usize,
    verifier_calls: usize,
    cost_draft: f64,
    cost_verifier: f64,
) -> Result<f64> {
    if tokens == 0 {
        return Err(HolaError::Domain("speedup of an empty trace".into()));
    }
    if !(cost_draft > 0.0 && cost_verifier > 0.0) {
        return Err(HolaError::Domain("per-call costs must be positive".into()));
    }
    let t = tokens as f64;
    Ok(t * cost_verifier / (t * cost_draft + verifier_calls as f64 * cost_verifier))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn models() -> (ModelWeights, ModelWeights) {
        let d = ModelConfig {
            n_layers: 1,
            d_model: 32,
            n_heads: 2,
            vocab_size: 260,
            max_seq_len: 48,
        };
        let v = ModelConfig {
            n_layers: 2,
            d_model: 48,
            n_heads: 4,
            ..d
        };
        (
            ModelWeights::init_random(d, 1).unwrap(),
            ModelWeights::init_random(v, 2).unwrap(),
        )
    }

    #[test]
    fn gate_examples() {
        let mut one_hot = vec![0.0f32; 260];
        one_hot[3] = 1.0;
        assert!(gate(&one_hot, 1.5).unwrap());
        assert!(!gate(&vec![1.0 / 260.0; 260], 1.5).unwrap());
        let mut p = vec![0.0f32; 10];
        p[..3].copy_from_slice(&[0.5, 0.25, 0.25]);
        let h = entropy(&p).unwrap();
        assert!(!gate(&p, h).unwrap());
        assert!(gate(&p, h + 1e-9).unwrap());
        assert!(gate(&[0.7, 0.7], 1.0).is_err());
    }

    #[test]
    fn limit_equivalences() {
        let (d, v) = models();
        let prompt: Vec<u32> = b"Q: 1+2=? A:".iter().map(|&b| b.into()).collect();
        let cfg = HsdConfig {
            tau: 1e9,
            max_tokens: 12,
            draft_chunk: 3,
        };
        let (out, trace) = decode(&d, &v, &prompt, &cfg).unwrap();
        assert_eq!(out, greedy_decode(&d, &prompt, 12).unwrap());
        assert_eq!(trace.verifier_calls, 0);

        let cfg = HsdConfig { tau: 0.0, ..cfg };
        let (out, trace) = decode(&d, &v, &prompt, &cfg).unwrap();
        assert_eq!(out, greedy_decode(&v, &prompt, 12).unwrap());
        assert_eq!(trace.verifier_calls, trace.emitted());
    }

    #[test]
    fn chunk_size_does_not_change_output() {
        let (d, v) = models();
        let prompt = [81, 58, 32, 55];
        let base = HsdConfig {
            tau: 5.0,
            max_tokens: 16,
            draft_chunk: 1,
        };
        let (a, ta) = decode(&d, &v, &prompt, &base).unwrap();
        assert!(ta.accepted_count > 0 && ta.verifier_calls > 0, "{ta:?}");
        for chunk in [2, 4, 7] {
            let (b, tb) = decode(&d, &v, &prompt, &HsdConfig { draft_chunk: chunk, ..base }).unwrap();
            assert_eq!(a, b);
            assert_eq!(ta.verifier_calls, tb.verifier_calls);
            assert!(tb.draft_calls >= tb.emitted());
        }
    }

    #[test]
    fn trace_totals_reconcile() {
        let (d, v) = models();
        let cfg = HsdConfig {
            tau: 5.0,
            max_tokens: 20,
            draft_chunk: 4,
        };
        let (out, trace) = decode(&d, &v, &[1, 2, 3], &cfg).unwrap();
        assert_eq!(out, trace.tokens());
        let gate_true = trace
            .records
            .iter()
            .filter(|r| r.decision == Decision::Accepted)
            .count();
        assert_eq!(trace.accepted_count, gate_true);
        assert_eq!(trace.accepted_count + trace.verified_count(), trace.emitted());
        assert!(trace.verifier_calls <= trace.emitted());
        assert!(trace.accepted_count > 0 && trace.verifier_calls > 0);
        assert!(trace.draft_calls >= trace.emitted());
        assert!(out.iter().all(|&t| (t as usize) < 260));
        for r in &trace.records {
            assert_eq!(r.decision == Decision::Accepted, r.entropy < cfg.tau);
        }
    }

    #[test]
    fn capacity_is_checked() {
        let (d, v) = models();
        let cfg = HsdConfig {
            tau: 1.5,
            max_tokens: 40,
            draft_chunk: 1,
        };
        assert!(matches!(
            decode(&d, &v, &[1; 10], &cfg),
            Err(HolaError::Capacity(_))
        ));
        assert!(matches!(
            decode(&d, &v, &[], &cfg),
            Err(HolaError::Domain(_))
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let (d, v) = models();
        let (_, trace) = decode(&d, &v, &[5, 6], &HsdConfig { tau: 5.0, max_tokens: 6, draft_chunk: 2 }).unwrap();
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        let line = first.lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["t", "token", "entropy", "decision", "micros"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back = DecodeTrace::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.records, trace.records);
        assert_eq!(back.verifier_calls, trace.verifier_calls);
    }

    #[test]
    fn speedup_examples() {
        let trace = |t: usize, calls: usize| DecodeTrace {
            records: (0..t)
                .map(|i| TokenRecord {
                    t: i,
                    token: 65,
                    entropy: 0.0,
                    decision: if i < calls { Decision::Verified } else { Decision::Accepted },
                    micros: 1,
                })
                .collect(),
            draft_calls: t,
            verifier_calls: calls,
            accepted_count: t - calls,
        };
        assert!((speedup_report(&trace(100, 0), 1.0, 10.0).unwrap() - 10.0).abs() < 1e-12);
        assert!(speedup_report(&trace(100, 100), 1.0, 10.0).unwrap() < 1.0);
        let s = speedup_report(&trace(100, 20), 1.0, 10.0).unwrap();
        assert!((s - 1000.0 / 300.0).abs() < 1e-12);
        assert!(speedup_report(&DecodeTrace::default(), 1.0, 10.0).is_err());
        assert!(speedup_report(&trace(10, 1), 0.0, 10.0).is_err());
    }
}
