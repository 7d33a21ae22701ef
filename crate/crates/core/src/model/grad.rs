//! Reverse-mode gradient of the next-token loss with respect to the pooled
//! query embedding.
//!
//! The query vector `q` is the mean of the token embeddings. Moving `q` by
//! `δ` while holding each token's offset from the mean fixed moves every
//! input row by `δ`, so `∂L/∂q = Σ_t ∂L/∂x_t` where `x_t` is the input row
//! at position `t`. [`next_token_loss`] takes that common shift explicitly,
//! which is what a finite-difference check perturbs.

use super::forward::{check_sequence, embed, gelu_grad, layer_forward, LayerCache};
use super::tokenizer::TokenId;
use super::weights::ModelWeights;
use crate::error::{HolaError, Result};
use crate::tensor::{layer_norm_with_stats, matmul, softmax_unchecked, NormStats, Tensor};

fn check_loss_input(weights: &ModelWeights, ids: &[TokenId]) -> Result<()> {
    if ids.len() < 2 {
        return Err(HolaError::Domain(
            "next-token loss needs at least two tokens".into(),
        ));
    }
    check_sequence(weights, ids)
}

fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|&v| (f64::from(v) - max).exp()).sum();
    max + s.ln()
}

/// Mean next-token cross-entropy over `ids`, with every input row shifted
/// by `shift` (length `d_model`) when given.
pub fn next_token_loss(weights: &ModelWeights, ids: &[TokenId], shift: Option<&[f32]>) -> Result<f64> {
    check_loss_input(weights, ids)?;
    if let Some(s) = shift {
        if s.len() != weights.config.d_model {
            return Err(HolaError::Shape(format!(
                "shift has {} entries, model width is {}",
                s.len(),
                weights.config.d_model
            )));
        }
    }
    let mut x = embed(weights, ids, shift);
    for layer in &weights.layers {
        x = layer_forward(weights.config.n_heads, layer.into(), &x, None);
    }
    let h = layer_norm_with_stats(&x, weights.final_gain.data(), weights.final_bias.data()).0;
    let logits = matmul(&h, &weights.output_projection)?;
    let targets = ids.len() - 1;
    let total: f64 = (0..targets)
        .map(|t| {
            let row = logits.row(t);
            log_sum_exp(row) - f64::from(row[ids[t + 1] as usize])
        })
        .sum();
    Ok(total / targets as f64)
}

fn ln_backward(stats: &NormStats, gain: &[f32], dy: &Tensor) -> Tensor {
    let (n, d) = dy.dims2();
    let mut dx = vec![0.0f32; n * d];
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = stats.xhat.row(i);
        let dxhat: Vec<f32> = dyr.iter().zip(gain).map(|(a, g)| a * g).collect();
        let mean_d = dxhat.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let mean_dx = dxhat
            .iter()
            .zip(xh)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum::<f64>()
            / d as f64;
        let inv = f64::from(stats.inv_std[i]);
        for j in 0..d {
            let v = (f64::from(dxhat[j]) - mean_d - f64::from(xh[j]) * mean_dx) * inv;
            dx[i * d + j] = v as f32;
        }
    }
    Tensor::matrix(n, d, dx).expect("n × d")
}

fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    matmul(a, b).expect("shapes fixed by the forward pass")
}

/// `∂L/∂q` for the mean next-token loss over `ids`; a `d_model` vector.
pub fn embedding_gradient(weights: &ModelWeights, ids: &[TokenId]) -> Result<Tensor> {
    check_loss_input(weights, ids)?;
    let cfg = weights.config;
    let (n, d) = (ids.len(), cfg.d_model);
    let d_head = cfg.d_head();
    let scale = 1.0 / (d_head as f32).sqrt();

    let mut caches: Vec<LayerCache> = Vec::with_capacity(cfg.n_layers);
    let mut x = embed(weights, ids, None);
    for layer in &weights.layers {
        let mut slot = None;
        x = layer_forward(cfg.n_heads, layer.into(), &x, Some(&mut slot));
        caches.push(slot.expect("cache requested"));
    }
    let (hf, final_stats) =
        layer_norm_with_stats(&x, weights.final_gain.data(), weights.final_bias.data());
    let logits = mm(&hf, &weights.output_projection);

    let targets = (n - 1) as f32;
    let mut dlogits = Tensor::zeros(&[n, cfg.vocab_size]);
    for t in 0..n - 1 {
        let p = softmax_unchecked(logits.row(t), 1.0);
        let row = dlogits.row_mut(t);
        for (g, pv) in row.iter_mut().zip(&p) {
            *g = pv / targets;
        }
        row[ids[t + 1] as usize] -= 1.0 / targets;
    }
    let dhf = mm(&dlogits, &weights.output_projection.transpose());
    let mut dx = ln_backward(&final_stats, weights.final_gain.data(), &dhf);

    for (layer, cache) in weights.layers.iter().zip(&caches).rev() {
        // MLP branch
        let dact = mm(&dx, &layer.w_down.transpose());
        let mut du = dact;
        for (g, &u) in du.data_mut().iter_mut().zip(cache.pre_act.data()) {
            *g *= gelu_grad(u);
        }
        let dh2 = mm(&du, &layer.w_up.transpose());
        let mut dx1 = ln_backward(&cache.ln2, layer.ln2_gain.data(), &dh2);
        dx1.add_assign(&dx)?;

        // attention branch
        let dattn = mm(&dx1, &layer.wo.transpose());
        let mut dq = vec![0.0f32; n * d];
        let mut dk = vec![0.0f32; n * d];
        let mut dv = vec![0.0f32; n * d];
        for (head, probs) in cache.probs.iter().enumerate() {
            let c0 = head * d_head;
            for i in 0..n {
                let p = &probs[i * n..i * n + i + 1];
                let do_i = &dattn.row(i)[c0..c0 + d_head];
                let dp: Vec<f32> = (0..=i)
                    .map(|j| crate::tensor::dot(do_i, &cache.v.row(j)[c0..c0 + d_head]))
                    .collect();
                let weighted: f32 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let qi = &cache.q.row(i)[c0..c0 + d_head];
                    let kj = &cache.k.row(j)[c0..c0 + d_head];
                    for c in 0..d_head {
                        dq[i * d + c0 + c] += ds * kj[c];
                        dk[j * d + c0 + c] += ds * qi[c];
                        dv[j * d + c0 + c] += p[j] * do_i[c];
                    }
                }
            }
        }
        let dq = Tensor::matrix(n, d, dq)?;
        let dk = Tensor::matrix(n, d, dk)?;
        let dv = Tensor::matrix(n, d, dv)?;
        let mut dh = mm(&dq, &layer.wq.transpose());
        dh.add_assign(&mm(&dk, &layer.wk.transpose()))?;
        dh.add_assign(&mm(&dv, &layer.wv.transpose()))?;
        let mut dx_in = ln_backward(&cache.ln1, layer.ln1_gain.data(), &dh);
        dx_in.add_assign(&dx1)?;
        dx = dx_in;
    }

    let grad: Vec<f32> = (0..d)
        .map(|j| (0..n).map(|t| f64::from(dx.get(t, j))).sum::<f64>() as f32)
        .collect();
    Ok(Tensor::vector(grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            vocab_size: 260,
            max_seq_len: 32,
        }
    }

    #[test]
    fn zero_output_projection_gives_zero_gradient() {
        let mut w = ModelWeights::init_random(cfg(), 4).unwrap();
        w.output_projection = Tensor::zeros(&[32, 260]);
        let g = embedding_gradient(&w, b"what is 2+2".map(u32::from).as_slice()).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_sequences_rejected() {
        let w = ModelWeights::init_random(cfg(), 4).unwrap();
        assert!(matches!(
            embedding_gradient(&w, &[65]),
            Err(HolaError::Domain(_))
        ));
        assert!(next_token_loss(&w, &[65], None).is_err());
    }

    #[test]
    fn central_differences_agree() {
        let w = ModelWeights::init_random(cfg(), 9).unwrap();
        let ids: Vec<u32> = b"Q: 3+4=? A:".iter().map(|&b| b.into()).collect();
        let g = embedding_gradient(&w, &ids).unwrap();
        let h = 1e-3f32;
        let mut worst = 0.0f64;
        for j in 0..cfg().d_model {
            let mut shift = vec![0.0f32; 32];
            shift[j] = h;
            let up = next_token_loss(&w, &ids, Some(&shift)).unwrap();
            shift[j] = -h;
            let down = next_token_loss(&w, &ids, Some(&shift)).unwrap();
            let fd = (up - down) / (2.0 * f64::from(h));
            worst = worst.max((fd - f64::from(g.data()[j])).abs());
        }
        let scale = g.l2_norm();
        assert!(worst <= 1e-2 * scale, "worst {worst} vs norm {scale}");
    }
}
