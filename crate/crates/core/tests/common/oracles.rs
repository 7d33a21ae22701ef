//! Brute-force oracles that share no code paths with the optimized
//! implementations beyond the public forward pass and quantizer.

use hola_core::lobi::{CalibrationSet, PrecisionMap};
use hola_core::model::{forward, ModelWeights};
use hola_core::quant::{dequantize_block, quantize_block_sized, Precision};
use hola_core::rag::{cosine, DocIndex};
use hola_core::tensor::{softmax, Tensor};

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn last_row(w: &ModelWeights, ids: &[u32]) -> Vec<f32> {
    let logits = forward(w, ids).unwrap();
    logits.row(logits.rows() - 1).to_vec()
}

/// Full forward passes with one block replaced.
pub fn block_error(
    w: &ModelWeights,
    tensor: &str,
    block: usize,
    p: Precision,
    calib: &CalibrationSet,
    block_size: usize,
) -> f64 {
    let baseline: Vec<Vec<f32>> = calib.samples().iter().map(|s| last_row(w, s)).collect();
    block_error_against(w, &baseline, tensor, block, p, calib, block_size)
}

fn block_error_against(
    w: &ModelWeights,
    baseline: &[Vec<f32>],
    tensor: &str,
    block: usize,
    p: Precision,
    calib: &CalibrationSet,
    block_size: usize,
) -> f64 {
    let mut patched = w.clone();
    let t = patched.tensor_mut(tensor).unwrap();
    let start = block * block_size;
    let end = (start + block_size).min(t.len());
    let q = quantize_block_sized(&t.data()[start..end], p, block_size).unwrap();
    t.data_mut()[start..end].copy_from_slice(&dequantize_block(&q).unwrap());
    let total: f64 = calib
        .samples()
        .iter()
        .zip(baseline)
        .map(|(s, base)| distance(base, &last_row(&patched, s)))
        .sum();
    total / calib.size() as f64
}

/// Per tensor: chosen precisions and the errors at 4, 8 and 16 bits.
pub type BruteMap = Vec<(String, Vec<Precision>, Vec<[f64; 3]>)>;

/// Every (block, precision) error by brute force, then argmin with ties
/// to the narrowest width. Returns precisions and errors per tensor, and
/// the number of patched-model evaluations made.
pub fn brute_force_assign(
    w: &ModelWeights,
    calib: &CalibrationSet,
    block_size: usize,
) -> (BruteMap, usize) {
    let baseline: Vec<Vec<f32>> = calib.samples().iter().map(|s| last_row(w, s)).collect();
    let mut out = Vec::new();
    let mut evals = 0;
    for name in w.config.quantizable_names() {
        let n_blocks = w.tensor(&name).unwrap().len().div_ceil(block_size);
        let mut precisions = Vec::new();
        let mut errors = Vec::new();
        for b in 0..n_blocks {
            let e = Precision::ALL.map(|p| block_error_against(w, &baseline, &name, b, p, calib, block_size));
            evals += 3;
            let mut best = 0;
            for i in 1..3 {
                if e[i] < e[best] {
                    best = i;
                }
            }
            precisions.push(Precision::ALL[best]);
            errors.push(e);
        }
        out.push((name, precisions, errors));
    }
    (out, evals)
}

pub fn map_matches(map: &PrecisionMap, brute: &BruteMap) -> Result<(), String> {
    for (name, precisions, errors) in brute {
        let t = map.get(name).ok_or(format!("map misses {name}"))?;
        if &t.precisions != precisions {
            return Err(format!("{name}: precisions differ"));
        }
        for (b, e) in errors.iter().enumerate() {
            for (i, p) in Precision::ALL.iter().enumerate() {
                let got = t.errors[p][b];
                if got.to_bits() != e[i].to_bits() {
                    return Err(format!("{name} block {b} {p}-bit: {got} vs {}", e[i]));
                }
            }
        }
    }
    Ok(())
}

/// Sorts every entry by (score desc, id asc) and takes the first k.
pub fn topk_by_sort(index: &DocIndex, q: &[f32], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = index
        .entries()
        .iter()
        .map(|e| (e.id.clone(), cosine(q, &e.embedding)))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Concatenate keys, take scaled dot products with a plain triple loop and
/// apply the library softmax per row.
pub fn concat_then_attend(q: &Tensor, k_doc: &Tensor, k_in: &Tensor) -> Tensor {
    let d = q.cols();
    let keys: Vec<&[f32]> = (0..k_doc.rows())
        .map(|i| k_doc.row(i))
        .chain((0..k_in.rows()).map(|i| k_in.row(i)))
        .collect();
    let mut out = Vec::new();
    for i in 0..q.rows() {
        let scores: Vec<f32> = keys
            .iter()
            .map(|k| {
                let mut acc = 0.0f32;
                for c in 0..d {
                    acc += q.get(i, c) * k[c];
                }
                acc / (d as f32).sqrt()
            })
            .collect();
        out.extend(softmax(&scores, 1.0).unwrap());
    }
    Tensor::matrix(q.rows(), keys.len(), out).unwrap()
}

pub fn median_by_sort(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
