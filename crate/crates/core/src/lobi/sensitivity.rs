//! Per-block quantization sensitivity on a calibration set.
//!
//! The error of a block is the mean, over calibration samples, of the L2
//! distance between final-position logits of the original model and of the
//! model with only that block quantized. Evaluation reuses each sample's
//! full-precision layer intermediates: only the output columns touched by
//! the block are recomputed in the patched matrix product, then the rest of
//! the network runs normally. The result is bit-identical to a full forward
//! pass with the patched weights.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{HolaError, Result};
use crate::model::forward::{
    attend, check_sequence, embed, last_row_logits, layer_forward_traced, logits_from_layer,
    mlp_residual, rows_of, LayerTrace, LayerView,
};
use crate::model::{ModelWeights, TokenId};
use crate::quant::{check_block_size, dequantize_block, quantize_block_sized, Precision};
use crate::tensor::{matmul, Tensor};

pub const DEFAULT_CALIB_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    samples: Vec<Vec<TokenId>>,
}

impl CalibrationSet {
    pub fn new(samples: Vec<Vec<TokenId>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(HolaError::Validation("calibration set is empty".into()));
        }
        if samples.iter().any(|s| s.is_empty()) {
            return Err(HolaError::Validation("calibration sample is empty".into()));
        }
        Ok(Self { samples })
    }

    pub fn size(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> &[Vec<TokenId>] {
        &self.samples
    }

    pub fn validate_for(&self, weights: &ModelWeights) -> Result<()> {
        self.samples.iter().try_for_each(|s| check_sequence(weights, s))
    }
}

/// L2 distance accumulated in f64, in index order.
pub fn logit_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Wq,
    Wk,
    Wv,
    Wo,
    Up,
    Down,
}

impl Part {
    fn parse(name: &str) -> Option<(usize, Part, &str)> {
        let rest = name.strip_prefix("layers.")?;
        let (idx, part) = rest.split_once('.')?;
        let p = match part {
            "attn.wq" => Part::Wq,
            "attn.wk" => Part::Wk,
            "attn.wv" => Part::Wv,
            "attn.wo" => Part::Wo,
            "mlp.up" => Part::Up,
            "mlp.down" => Part::Down,
            _ => return None,
        };
        Some((idx.parse().ok()?, p, part))
    }
}

struct SampleTrace {
    layers: Vec<LayerTrace>,
    logits: Vec<f32>,
}

/// Overwrites columns `cols` of `out` with those of `a·w`, accumulating
/// exactly as [`matmul`] does.
fn recompute_cols(out: &mut Tensor, a: &Tensor, w: &Tensor, cols: Range<usize>) {
    let (m, k) = a.dims2();
    let n = w.cols();
    let wd = w.data();
    for i in 0..m {
        let ar = a.row(i);
        let orow = out.row_mut(i);
        for j in cols.clone() {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += ar[p] * wd[p * n + j];
            }
            orow[j] = acc;
        }
    }
}

/// Precomputed full-precision passes over a calibration set.
pub struct Sensitivity<'a> {
    weights: &'a ModelWeights,
    samples: Vec<SampleTrace>,
    block_size: usize,
}

impl<'a> Sensitivity<'a> {
    pub fn new(weights: &'a ModelWeights, calib: &CalibrationSet, block_size: usize) -> Result<Self> {
        check_block_size(block_size)?;
        calib.validate_for(weights)?;
        let n_heads = weights.config.n_heads;
        let samples = calib
            .samples()
            .par_iter()
            .map(|ids| {
                let mut x = embed(weights, ids, None);
                let mut layers = Vec::with_capacity(weights.layers.len());
                for layer in &weights.layers {
                    let (out, trace) = layer_forward_traced(n_heads, layer.into(), &x);
                    layers.push(trace);
                    x = out;
                }
                SampleTrace {
                    layers,
                    logits: last_row_logits(weights, &x),
                }
            })
            .collect();
        Ok(Self {
            weights,
            samples,
            block_size,
        })
    }

    /// Mean L2 norm of the full-precision final-position logits.
    pub fn mean_logit_norm(&self) -> f64 {
        let total: f64 = self.samples.iter().map(|s| crate::tensor::l2_norm(&s.logits)).sum();
        total / self.samples.len() as f64
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn block_count(&self, tensor: &str) -> Result<usize> {
        Ok(self.target(tensor)?.2.len().div_ceil(self.block_size))
    }

    fn target(&self, tensor: &str) -> Result<(usize, Part, &'a Tensor, &'static str)> {
        let cfg = &self.weights.config;
        if !cfg.is_quantizable(tensor) {
            return Err(HolaError::Validation(format!("{tensor} is not a quantizable tensor")));
        }
        let (layer, part, _) = Part::parse(tensor).expect("quantizable names parse");
        let name = match part {
            Part::Wq => "attn.wq",
            Part::Wk => "attn.wk",
            Part::Wv => "attn.wv",
            Part::Wo => "attn.wo",
            Part::Up => "mlp.up",
            Part::Down => "mlp.down",
        };
        Ok((layer, part, self.weights.tensor(tensor).expect("audited"), name))
    }

    /// Errors of one block at each of `precisions`, in order.
    pub fn block_errors(&self, tensor: &str, block: usize, precisions: &[Precision]) -> Result<Vec<f64>> {
        let (layer, part, original, part_name) = self.target(tensor)?;
        let len = original.len();
        let start = block * self.block_size;
        if start >= len {
            return Err(HolaError::Domain(format!(
                "{tensor} has {} blocks, asked for block {block}",
                len.div_ceil(self.block_size)
            )));
        }
        let end = (start + self.block_size).min(len);
        let cols_total = original.cols();
        let cols = if start / cols_total == (end - 1) / cols_total {
            start % cols_total..(end - 1) % cols_total + 1
        } else {
            0..cols_total
        };

        let mut patched = original.clone();
        let mut out = Vec::with_capacity(precisions.len());
        for &p in precisions {
            let q = quantize_block_sized(&original.data()[start..end], p, self.block_size)?;
            let values = dequantize_block(&q)?;
            let unchanged = values
                .iter()
                .zip(&original.data()[start..end])
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if unchanged {
                out.push(0.0);
                continue;
            }
            patched.data_mut()[start..end].copy_from_slice(&values);
            let total: f64 = self
                .samples
                .iter()
                .map(|s| {
                    let logits = self.patched_logits(s, layer, part, part_name, &patched, cols.clone());
                    logit_distance(&s.logits, &logits)
                })
                .sum();
            out.push(total / self.samples.len() as f64);
        }
        Ok(out)
    }

    fn patched_logits(
        &self,
        s: &SampleTrace,
        l: usize,
        part: Part,
        part_name: &str,
        w: &Tensor,
        cols: Range<usize>,
    ) -> Vec<f32> {
        let weights = self.weights;
        let n_heads = weights.config.n_heads;
        let t = &s.layers[l];
        let n = t.x.rows();
        let last_layer = l + 1 == weights.layers.len();
        // the final layer only feeds the last position's logits
        let rows = if last_layer { n - 1..n } else { 0..n };
        let view = LayerView::from(&weights.layers[l]).with_part(part_name, w);

        let out = match part {
            Part::Wq | Part::Wk | Part::Wv => {
                let mut q = rows_of(&t.q, rows.clone());
                let mut k = t.k.clone();
                let mut v = t.v.clone();
                match part {
                    Part::Wq => recompute_cols(&mut q, &rows_of(&t.h1, rows.clone()), w, cols),
                    Part::Wk => recompute_cols(&mut k, &t.h1, w, cols),
                    _ => recompute_cols(&mut v, &t.h1, w, cols),
                }
                let (attn, _) = attend(n_heads, &q, &k, &v, rows.clone(), false);
                let mut x1 = matmul(&attn, view.wo).expect("audited shape");
                x1.add_assign(&rows_of(&t.x, rows)).expect("same shape");
                mlp_residual(view, &x1).out
            }
            Part::Wo => {
                let mut x1 = rows_of(&t.x1, rows.clone());
                let mut proj = x1.clone();
                recompute_cols(&mut proj, &rows_of(&t.attn, rows.clone()), w, cols.clone());
                let x = rows_of(&t.x, rows);
                for i in 0..x1.rows() {
                    for j in cols.clone() {
                        x1.row_mut(i)[j] = proj.get(i, j) + x.get(i, j);
                    }
                }
                mlp_residual(view, &x1).out
            }
            Part::Up => {
                let mut pre = rows_of(&t.pre_act, rows.clone());
                recompute_cols(&mut pre, &rows_of(&t.h2, rows.clone()), w, cols.clone());
                let mut act = rows_of(&t.act, rows.clone());
                for i in 0..act.rows() {
                    for j in cols.clone() {
                        act.row_mut(i)[j] = crate::model::forward::gelu(pre.get(i, j));
                    }
                }
                let mut out = matmul(&act, view.w_down).expect("audited shape");
                out.add_assign(&rows_of(&t.x1, rows)).expect("same shape");
                out
            }
            Part::Down => {
                let mut out = rows_of(&t.down, rows.clone());
                recompute_cols(&mut out, &rows_of(&t.act, rows.clone()), w, cols);
                out.add_assign(&rows_of(&t.x1, rows)).expect("same shape");
                out
            }
        };
        if last_layer {
            last_row_logits(weights, &out)
        } else {
            logits_from_layer(weights, l + 1, out)
        }
    }
}

/// Error of a single block at a single precision over `calib`.
pub fn block_error(
    weights: &ModelWeights,
    tensor: &str,
    block: usize,
    precision: Precision,
    calib: &CalibrationSet,
) -> Result<f64> {
    block_error_sized(weights, tensor, block, precision, calib, crate::quant::BLOCK_SIZE)
}

pub fn block_error_sized(
    weights: &ModelWeights,
    tensor: &str,
    block: usize,
    precision: Precision,
    calib: &CalibrationSet,
    block_size: usize,
) -> Result<f64> {
    let s = Sensitivity::new(weights, calib, block_size)?;
    Ok(s.block_errors(tensor, block, &[precision])?[0])
}
