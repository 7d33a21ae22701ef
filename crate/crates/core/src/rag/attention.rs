use crate::error::{HolaError, Result};
use crate::tensor::{matmul, softmax_rows, Tensor};

/// `softmax(Q·Kᵀ / √d)` row-wise; `m × n`.
pub fn attention(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || k.rank() != 2 || q.cols() != k.cols() {
        return Err(HolaError::Shape(format!(
            "attention: Q {:?} vs K {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if k.rows() == 0 {
        return Err(HolaError::Shape("attention needs at least one key".into()));
    }
    let sqrt_d = (q.cols() as f32).sqrt();
    let mut scores = matmul(q, &k.transpose())?;
    for s in scores.data_mut() {
        *s /= sqrt_d;
    }
    softmax_rows(&scores)
}

/// Attention over `K_doc ⊕ K_input`, document keys first; `m × (p + n)`.
pub fn compositional_attention(q: &Tensor, k_doc: &Tensor, k_input: &Tensor) -> Result<Tensor> {
    if k_doc.rank() != 2 || k_input.rank() != 2 || k_doc.cols() != q.cols() || k_input.cols() != q.cols() {
        return Err(HolaError::Shape(format!(
            "compositional attention: Q {:?}, K_doc {:?}, K_input {:?}",
            q.shape(),
            k_doc.shape(),
            k_input.shape()
        )));
    }
    if k_input.rows() == 0 {
        return Err(HolaError::Shape("K_input needs at least one row".into()));
    }
    attention(q, &Tensor::concat_rows(&[k_doc, k_input])?)
}
