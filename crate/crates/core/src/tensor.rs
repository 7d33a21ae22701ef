//! Dense rank-1/rank-2 tensors and the handful of kernels the models need.
//!
//! Everything here is a pure function of its inputs. Matrix products
//! accumulate each output element in ascending inner-index order, so results
//! are reproducible bit-for-bit on a given target.

use crate::error::{HolaError, Result};

/// Layer-norm epsilon shared by the forward pass and its gradient.
pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(HolaError::Shape(format!(
                "tensors are rank 1 or 2, got rank {}",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(HolaError::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(HolaError::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Rows and columns, treating a vector as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Stacks rank-2 tensors with matching column counts along the row axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts
            .iter()
            .find(|p| p.rows() > 0)
            .map_or_else(|| parts.first().map_or(0, |p| p.cols()), |p| p.cols());
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rows() == 0 {
                continue;
            }
            if p.cols() != cols {
                return Err(HolaError::Shape(format!(
                    "cannot concatenate {} columns with {}",
                    p.cols(),
                    cols
                )));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, cols, data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(HolaError::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(HolaError::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.data)
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

/// `a[m×k] · b[k×n]`; vectors are treated as single rows.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if b.rank() != 2 || k != k2 {
        return Err(HolaError::Shape(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// Temperature softmax with max subtraction. Accumulates in f64.
pub fn softmax(v: &[f32], temperature: f32) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(HolaError::Shape("softmax of an empty vector".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(HolaError::Domain(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(HolaError::Numeric("softmax input is not finite".into()));
    }
    Ok(softmax_unchecked(v, temperature))
}

pub(crate) fn softmax_unchecked(v: &[f32], temperature: f32) -> Vec<f32> {
    let t = f64::from(temperature);
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = v
        .iter()
        .map(|&x| ((f64::from(x) - f64::from(max)) / t).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.dims2();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        data.extend(softmax(t.row(i), 1.0)?);
    }
    Tensor::new(t.shape().to_vec(), data)
}

fn check_probabilities(p: &[f32]) -> Result<()> {
    if p.is_empty() {
        return Err(HolaError::Domain("empty probability vector".into()));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(HolaError::Domain(
            "probabilities must be finite and nonnegative".into(),
        ));
    }
    let sum: f64 = p.iter().map(|&x| f64::from(x)).sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(HolaError::Domain(format!(
            "probabilities sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Shannon entropy in nats; zero-probability terms contribute nothing.
pub fn entropy(p: &[f32]) -> Result<f64> {
    check_probabilities(p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f32]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let x = f64::from(x);
            -x * x.ln()
        })
        .sum();
    h.max(0.0)
}

/// Index of the largest element; the lowest index wins ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-row normalization statistics, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormStats {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
}

pub(crate) fn layer_norm_with_stats(x: &Tensor, gain: &[f32], bias: &[f32]) -> (Tensor, NormStats) {
    let (r, c) = x.dims2();
    let mut out = vec![0.0f32; r * c];
    let mut xhat = vec![0.0f32; r * c];
    let mut inv_std = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / c as f64;
        let var = row
            .iter()
            .map(|&v| {
                let d = f64::from(v) - mean;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let inv = (1.0 / (var + f64::from(LN_EPS)).sqrt()) as f32;
        let mean = mean as f32;
        inv_std.push(inv);
        for j in 0..c {
            let h = (row[j] - mean) * inv;
            xhat[i * c + j] = h;
            out[i * c + j] = h * gain[j] + bias[j];
        }
    }
    let shape = x.shape().to_vec();
    (
        Tensor { shape: shape.clone(), data: out },
        NormStats {
            xhat: Tensor { shape, data: xhat },
            inv_std,
        },
    )
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(HolaError::Shape(format!(
            "layer_norm: width {c}, gain {}, bias {}",
            gain.len(),
            bias.len()
        )));
    }
    Ok(layer_norm_with_stats(x, gain.data(), bias.data()).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2();
        let n = b.cols();
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += f64::from(a.get(i, p)) * f64::from(b.get(p, j));
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn naive_matmul_f32(a: &Tensor, b: &Tensor) -> Vec<f32> {
        let (m, k) = a.dims2();
        let n = b.cols();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    #[test]
    fn identity_and_projector_products() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);

        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let expected = Tensor::from_rows(&[vec![5.0, 6.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(matmul(&p, &b).unwrap(), expected);
    }

    #[test]
    fn matmul_against_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((f64::from(*g) - e).abs() <= 1e-6);
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(HolaError::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&[0.0; 4], 1.0).unwrap();
        assert!(u.iter().all(|&p| (p - 0.25).abs() < 1e-7));

        let s = softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert!((s[0] - 1.0).abs() <= 1e-6 && s[1].abs() <= 1e-6);

        assert!(matches!(softmax(&[], 1.0), Err(HolaError::Shape(_))));
        assert!(matches!(
            softmax(&[f32::NAN, 1.0], 1.0),
            Err(HolaError::Numeric(_))
        ));
    }

    #[test]
    fn softmax_matches_extended_precision() {
        // e^k / (e + e^2 + e^3), evaluated in f64.
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        let oracle = [(1.0f64).exp() / z, (2.0f64).exp() / z, (3.0f64).exp() / z];
        let got = softmax(&[1.0, 2.0, 3.0], 1.0).unwrap();
        for (g, o) in got.iter().zip(oracle) {
            assert!((f64::from(*g) - o).abs() <= 1e-7, "{g} vs {o}");
        }
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let uniform = vec![1.0 / 256.0; 256];
        assert!((entropy(&uniform).unwrap() - 256f64.ln()).abs() < 1e-6);
        let h = entropy(&[0.5, 0.25, 0.25]).unwrap();
        assert!((h - 1.5 * 2f64.ln()).abs() < 1e-9);
        assert!((h - 1.0397).abs() < 1e-4);
        assert!(matches!(entropy(&[0.5, 0.2]), Err(HolaError::Domain(_))));
        assert!(matches!(entropy(&[1.5, -0.5]), Err(HolaError::Domain(_))));
    }

    #[test]
    fn layer_norm_normalizes() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let g = Tensor::filled(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &g, &b).unwrap();
        let mean: f32 = y.data().iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            ticks in prop::collection::vec(-400i32..400, 1..64),
            shift_ticks in -800i32..800,
        ) {
            // Eighth-unit grid so the shifted logits are exact in f32.
            let logits: Vec<f32> = ticks.iter().map(|&t| t as f32 / 8.0).collect();
            let shift = shift_ticks as f32 / 8.0;
            let a = softmax(&logits, 1.0).unwrap();
            let shifted: Vec<f32> = logits.iter().map(|x| x + shift).collect();
            let b = softmax(&shifted, 1.0).unwrap();
            let sum: f64 = a.iter().map(|&p| f64::from(p)).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn entropy_is_bounded(weights in prop::collection::vec(0.0f32..10.0, 1..300)) {
            let total: f32 = weights.iter().sum();
            prop_assume!(total > 0.0);
            let p: Vec<f32> = weights.iter().map(|w| w / total).collect();
            let sum: f64 = p.iter().map(|&x| f64::from(x)).sum();
            prop_assume!((sum - 1.0).abs() <= 1e-5);
            let h = entropy(&p).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-6);
        }

        #[test]
        fn matmul_matches_naive_oracle(m in 1usize..64, k in 1usize..64, n in 1usize..64, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            let got = matmul(&a, &b).unwrap();
            let f32_oracle = naive_matmul_f32(&a, &b);
            let f64_oracle = naive_matmul(&a, &b);
            let gamma = k as f64 * f64::from(f32::EPSILON);
            for (idx, g) in got.data().iter().enumerate() {
                let e = f32_oracle[idx];
                prop_assert!((g - e).abs() <= 1e-6 * e.abs().max(f32::MIN_POSITIVE));
                // Standard forward error bound for a length-k dot product.
                let (i, j) = (idx / n, idx % n);
                let abs_sum: f64 = (0..k)
                    .map(|p| f64::from(a.get(i, p).abs()) * f64::from(b.get(p, j).abs()))
                    .sum();
                prop_assert!((f64::from(*g) - f64_oracle[idx]).abs() <= gamma * abs_sum);
            }
        }
    }
}
