use std::ops::Range;

use super::tokenizer::TokenId;
use super::weights::{LayerWeights, ModelWeights};
use crate::error::{HolaError, Result};
use crate::tensor::{self, layer_norm_with_stats, matmul, softmax_unchecked, NormStats, Tensor};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

pub(crate) fn gelu(u: f32) -> f32 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f32) -> f32 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// Borrowed view of one block, so a single matrix can be swapped out
/// without cloning the rest of the layer.
#[derive(Clone, Copy)]
pub(crate) struct LayerView<'a> {
    pub ln1_gain: &'a Tensor,
    pub ln1_bias: &'a Tensor,
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    pub wo: &'a Tensor,
    pub ln2_gain: &'a Tensor,
    pub ln2_bias: &'a Tensor,
    pub w_up: &'a Tensor,
    pub w_down: &'a Tensor,
}

impl<'a> From<&'a LayerWeights> for LayerView<'a> {
    fn from(l: &'a LayerWeights) -> Self {
        Self {
            ln1_gain: &l.ln1_gain,
            ln1_bias: &l.ln1_bias,
            wq: &l.wq,
            wk: &l.wk,
            wv: &l.wv,
            wo: &l.wo,
            ln2_gain: &l.ln2_gain,
            ln2_bias: &l.ln2_bias,
            w_up: &l.w_up,
            w_down: &l.w_down,
        }
    }
}

impl<'a> LayerView<'a> {
    /// Replaces the matrix addressed by a layer-relative part name.
    pub fn with_part(mut self, part: &str, t: &'a Tensor) -> Self {
        match part {
            "attn.wq" => self.wq = t,
            "attn.wk" => self.wk = t,
            "attn.wv" => self.wv = t,
            "attn.wo" => self.wo = t,
            "mlp.up" => self.w_up = t,
            "mlp.down" => self.w_down = t,
            "ln1.gain" => self.ln1_gain = t,
            "ln1.bias" => self.ln1_bias = t,
            "ln2.gain" => self.ln2_gain = t,
            "ln2.bias" => self.ln2_bias = t,
            _ => {}
        }
        self
    }
}

/// Activations retained for the backward pass.
pub(crate) struct LayerCache {
    pub ln1: NormStats,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Per head, an `n × n` lower-triangular matrix of attention weights.
    pub probs: Vec<Vec<f32>>,
    pub ln2: NormStats,
    pub pre_act: Tensor,
}

pub(crate) fn check_sequence(weights: &ModelWeights, ids: &[TokenId]) -> Result<()> {
    let cfg = &weights.config;
    if ids.is_empty() {
        return Err(HolaError::Domain("forward needs a nonempty sequence".into()));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(HolaError::Capacity(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            ids.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(HolaError::Domain(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Token plus position embeddings, optionally shifted by a common vector.
pub(crate) fn embed(weights: &ModelWeights, ids: &[TokenId], shift: Option<&[f32]>) -> Tensor {
    let d = weights.config.d_model;
    let mut data = Vec::with_capacity(ids.len() * d);
    for (t, &id) in ids.iter().enumerate() {
        let tok = weights.token_embedding.row(id as usize);
        let pos = weights.position_embedding.row(t);
        match shift {
            Some(s) => data.extend((0..d).map(|j| tok[j] + s[j] + pos[j])),
            None => data.extend(tok.iter().zip(pos).map(|(a, b)| a + b)),
        }
    }
    Tensor::matrix(ids.len(), d, data).expect("rows of width d")
}

/// Causal attention for query rows `rows`, heads concatenated; also the
/// per-head `n × n` weights when `keep` is set.
pub(crate) fn attend(
    n_heads: usize,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    rows: Range<usize>,
    keep: bool,
) -> (Tensor, Vec<Vec<f32>>) {
    let (n, d) = k.dims2();
    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f32).sqrt();
    let first = rows.start;
    let m = rows.len();
    let mut probs = Vec::new();
    let mut attn = vec![0.0f32; m * d];
    let mut scores = Vec::with_capacity(n);
    for head in 0..n_heads {
        let cols = head * d_head..(head + 1) * d_head;
        let mut head_probs = if keep { vec![0.0f32; n * n] } else { Vec::new() };
        for i in rows.clone() {
            let qi = &q.row(i - (n - q.rows()))[cols.clone()];
            scores.clear();
            scores.extend((0..=i).map(|j| tensor::dot(qi, &k.row(j)[cols.clone()]) * scale));
            let p = softmax_unchecked(&scores, 1.0);
            let r = i - first;
            let out = &mut attn[r * d + cols.start..r * d + cols.end];
            for (j, &pj) in p.iter().enumerate() {
                let vj = &v.row(j)[cols.clone()];
                for (o, &vv) in out.iter_mut().zip(vj) {
                    *o += pj * vv;
                }
            }
            if keep {
                head_probs[i * n..i * n + p.len()].copy_from_slice(&p);
            }
        }
        if keep {
            probs.push(head_probs);
        }
    }
    (Tensor::matrix(m, d, attn).expect("m × d"), probs)
}

pub(crate) struct MlpOut {
    pub out: Tensor,
    pub h2: Tensor,
    pub ln2: NormStats,
    pub pre_act: Tensor,
    pub act: Tensor,
    pub down: Tensor,
}

/// `x1 + down(gelu(up(ln2(x1))))`, keeping the intermediates.
pub(crate) fn mlp_residual(layer: LayerView<'_>, x1: &Tensor) -> MlpOut {
    let (h2, ln2) = layer_norm_with_stats(x1, layer.ln2_gain.data(), layer.ln2_bias.data());
    let pre_act = matmul(&h2, layer.w_up).expect("audited shape");
    let mut act = pre_act.clone();
    for a in act.data_mut() {
        *a = gelu(*a);
    }
    let down = matmul(&act, layer.w_down).expect("audited shape");
    let mut out = down.clone();
    out.add_assign(x1).expect("same shape");
    MlpOut {
        out,
        h2,
        ln2,
        pre_act,
        act,
        down,
    }
}

/// Full-precision intermediates of one layer, for re-running it with a
/// single matrix changed.
pub(crate) struct LayerTrace {
    pub x: Tensor,
    pub h1: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub attn: Tensor,
    pub x1: Tensor,
    pub h2: Tensor,
    pub pre_act: Tensor,
    pub act: Tensor,
    pub down: Tensor,
}

fn layer_forward_full(
    n_heads: usize,
    layer: LayerView<'_>,
    x: &Tensor,
    keep: bool,
) -> (Tensor, LayerCache, LayerTrace) {
    let n = x.rows();
    let (h1, ln1) = layer_norm_with_stats(x, layer.ln1_gain.data(), layer.ln1_bias.data());
    let q = matmul(&h1, layer.wq).expect("audited shape");
    let k = matmul(&h1, layer.wk).expect("audited shape");
    let v = matmul(&h1, layer.wv).expect("audited shape");
    let (attn, probs) = attend(n_heads, &q, &k, &v, 0..n, keep);
    let mut x1 = matmul(&attn, layer.wo).expect("audited shape");
    x1.add_assign(x).expect("same shape");
    let m = mlp_residual(layer, &x1);
    let cache = LayerCache {
        ln1,
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        probs,
        ln2: m.ln2,
        pre_act: m.pre_act.clone(),
    };
    let trace = LayerTrace {
        x: x.clone(),
        h1,
        q,
        k,
        v,
        attn,
        x1,
        h2: m.h2,
        pre_act: m.pre_act,
        act: m.act,
        down: m.down,
    };
    (m.out, cache, trace)
}

pub(crate) fn layer_forward(
    n_heads: usize,
    layer: LayerView<'_>,
    x: &Tensor,
    cache: Option<&mut Option<LayerCache>>,
) -> Tensor {
    let keep = cache.is_some();
    let (out, c, _) = layer_forward_full(n_heads, layer, x, keep);
    if let Some(slot) = cache {
        *slot = Some(c);
    }
    out
}

pub(crate) fn layer_forward_traced(n_heads: usize, layer: LayerView<'_>, x: &Tensor) -> (Tensor, LayerTrace) {
    let (out, _, trace) = layer_forward_full(n_heads, layer, x, false);
    (out, trace)
}

/// Output of a layer at the last position only; bit-identical to the
/// last row of [`layer_forward`].
pub(crate) fn layer_forward_last(n_heads: usize, layer: LayerView<'_>, x: &Tensor) -> Tensor {
    let n = x.rows();
    let (h1, _) = layer_norm_with_stats(x, layer.ln1_gain.data(), layer.ln1_bias.data());
    let q = matmul(&last_row(&h1), layer.wq).expect("audited shape");
    let k = matmul(&h1, layer.wk).expect("audited shape");
    let v = matmul(&h1, layer.wv).expect("audited shape");
    let (attn, _) = attend(n_heads, &q, &k, &v, n - 1..n, false);
    let mut x1 = matmul(&attn, layer.wo).expect("audited shape");
    x1.add_assign(&last_row(x)).expect("same shape");
    mlp_residual(layer, &x1).out
}

pub(crate) fn last_row(t: &Tensor) -> Tensor {
    rows_of(t, t.rows() - 1..t.rows())
}

pub(crate) fn rows_of(t: &Tensor, rows: Range<usize>) -> Tensor {
    let c = t.cols();
    Tensor::matrix(rows.len(), c, t.data()[rows.start * c..rows.end * c].to_vec()).expect("row slice")
}

/// Last-position logits from the residual stream entering layer `from`.
pub(crate) fn logits_from_layer(weights: &ModelWeights, from: usize, x: Tensor) -> Vec<f32> {
    let n_layers = weights.layers.len();
    if from == n_layers {
        return last_row_logits(weights, &x);
    }
    let x = run_layers_until(weights, from, n_layers - 1, x);
    let last = layer_forward_last(weights.config.n_heads, (&weights.layers[n_layers - 1]).into(), &x);
    last_row_logits(weights, &last)
}

fn run_layers_until(weights: &ModelWeights, from: usize, to: usize, mut x: Tensor) -> Tensor {
    for layer in &weights.layers[from..to] {
        x = layer_forward(weights.config.n_heads, layer.into(), &x, None);
    }
    x
}

/// Runs layers `from..` on a residual stream.
pub(crate) fn run_layers(weights: &ModelWeights, from: usize, x: Tensor) -> Tensor {
    run_layers_until(weights, from, weights.layers.len(), x)
}

pub(crate) fn final_norm(weights: &ModelWeights, x: &Tensor) -> Tensor {
    layer_norm_with_stats(x, weights.final_gain.data(), weights.final_bias.data()).0
}

/// Logits for the last row of a residual stream.
pub(crate) fn last_row_logits(weights: &ModelWeights, x: &Tensor) -> Vec<f32> {
    let last = Tensor::vector(x.row(x.rows() - 1).to_vec());
    let h = final_norm(weights, &last);
    matmul(&h, &weights.output_projection)
        .expect("audited shape")
        .into_data()
}

/// Full forward pass: `seq_len × vocab_size` logits.
pub fn forward(weights: &ModelWeights, ids: &[TokenId]) -> Result<Tensor> {
    let h = hidden_states(weights, ids)?;
    matmul(&h, &weights.output_projection)
}

/// Final-layer hidden states (after the closing layer norm), `seq_len × d_model`.
pub fn hidden_states(weights: &ModelWeights, ids: &[TokenId]) -> Result<Tensor> {
    check_sequence(weights, ids)?;
    let x = run_layers(weights, 0, embed(weights, ids, None));
    Ok(final_norm(weights, &x))
}

/// Logits at the final position only.
pub fn last_logits(weights: &ModelWeights, ids: &[TokenId]) -> Result<Vec<f32>> {
    check_sequence(weights, ids)?;
    Ok(logits_from_layer(weights, 0, embed(weights, ids, None)))
}
