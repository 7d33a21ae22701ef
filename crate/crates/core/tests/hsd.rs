use hola_core::hsd::{decode, decode_verifier_only, gate, greedy_decode, speedup_report, DecodeTrace, Decision, HsdConfig};
use hola_core::model::{ModelConfig, ModelWeights, TokenId};
use hola_core::tensor::entropy;
use proptest::prelude::*;

fn models() -> (ModelWeights, ModelWeights) {
    let cfg = |n_layers, d_model| ModelConfig {
        n_layers,
        d_model,
        n_heads: 2,
        vocab_size: 260,
        max_seq_len: 48,
    };
    (
        ModelWeights::init_random(cfg(1, 32), 10).unwrap(),
        ModelWeights::init_random(cfg(2, 48), 11).unwrap(),
    )
}

fn run(tau: f64, chunk: usize, prompt: &[TokenId]) -> (Vec<TokenId>, DecodeTrace) {
    let (d, v) = models();
    let cfg = HsdConfig {
        tau,
        max_tokens: 12,
        draft_chunk: chunk,
    };
    decode(&d, &v, prompt, &cfg).unwrap()
}

/// Accepted tokens are the draft's greedy continuation of the emitted
/// prefix; verified ones are the verifier's.
fn replay_oracle(trace: &DecodeTrace, prompt: &[TokenId]) {
    let (d, v) = models();
    let mut seq = prompt.to_vec();
    for r in &trace.records {
        let model = match r.decision {
            Decision::Accepted => &d,
            Decision::Verified => &v,
        };
        let want = greedy_decode(model, &seq, 1).unwrap()[0];
        assert_eq!(r.token, want, "position {}", r.t);
        seq.push(r.token);
    }
}

#[test]
fn mixed_gates_replay_against_single_step_greedy() {
    let prompt: Vec<TokenId> = b"Q: 4+4=? A:".iter().map(|&b| b.into()).collect();
    let (_, open) = run(1e9, 4, &prompt);
    let mut h = open.entropies();
    h.sort_by(f64::total_cmp);
    let tau = h[h.len() / 2];
    let (_, trace) = run(tau, 4, &prompt);
    assert!(trace.verifier_calls > 0 && trace.accepted_count > 0, "tau {tau} must split the stream");
    replay_oracle(&trace, &prompt);
}

#[test]
fn verifier_only_counts_every_token() {
    let (_, v) = models();
    let prompt = [72u32, 105];
    let (out, trace) = decode_verifier_only(&v, &prompt, 9).unwrap();
    assert_eq!(trace.verifier_calls, out.len());
    assert_eq!(trace.draft_calls, 0);
    assert_eq!(speedup_report(&trace, 1.0, 1.0).unwrap(), 0.5);
}

#[test]
fn gate_is_strict_at_the_boundary() {
    let uniform = vec![0.25f32; 4];
    let h = entropy(&uniform).unwrap();
    assert!(!gate(&uniform, h).unwrap());
    assert!(gate(&uniform, h + 1e-9).unwrap());
    assert!(gate(&[0.1, 0.2], 1.0).is_err());
}

#[test]
fn jsonl_rejects_unknown_fields() {
    let line = r#"{"t":0,"token":65,"entropy":1.0,"decision":"accepted","micros":3,"extra":1}"#;
    assert!(DecodeTrace::read_jsonl(line.as_bytes()).is_err());
    let line = r#"{"t":0,"token":65,"entropy":1.0,"decision":"accepted","micros":3}"#;
    assert_eq!(DecodeTrace::read_jsonl(line.as_bytes()).unwrap().accepted_count, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn trace_invariants(
        prompt in prop::collection::vec(0u32..256, 1..12),
        tau in prop_oneof![Just(0.0), 4.0f64..6.0, Just(1e9)],
        chunk in 1usize..6,
    ) {
        let (out, trace) = run(tau, chunk, &prompt);
        prop_assert_eq!(out.len(), trace.emitted());
        prop_assert!(out.iter().all(|&t| (t as usize) < 260));
        prop_assert!(trace.draft_calls >= trace.emitted());
        let gated = trace.records.iter().filter(|r| r.entropy < tau).count();
        prop_assert_eq!(trace.accepted_count, gated);
        prop_assert_eq!(trace.accepted_count + trace.verifier_calls, trace.emitted());
        for (i, r) in trace.records.iter().enumerate() {
            prop_assert_eq!(r.t, i);
        }

        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let back = DecodeTrace::read_jsonl(buf.as_slice()).unwrap();
        prop_assert_eq!(&back.records, &trace.records);
        prop_assert_eq!(back.verifier_calls, trace.verifier_calls);
    }

    #[test]
    fn verifier_demand_is_monotone_in_tau(prompt in prop::collection::vec(0u32..256, 1..12), a in 0.0f64..8.0, b in 0.0f64..8.0) {
        let (_, open) = run(1e9, 4, &prompt);
        let h = open.entropies();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let above = |tau: f64| h.iter().filter(|&&e| e >= tau).count();
        prop_assert!(above(lo) >= above(hi));
    }

    #[test]
    fn chunking_never_changes_the_output(prompt in prop::collection::vec(0u32..256, 1..12), chunk in 2usize..8) {
        let tau = 5.3;
        prop_assert_eq!(run(tau, 1, &prompt).0, run(tau, chunk, &prompt).0);
    }
}
