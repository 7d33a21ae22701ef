//! Independent f64 re-implementation of the toy decoder, used as an oracle.

use hola_core::model::ModelWeights;
use hola_core::Tensor;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

fn vec64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
}

/// Mean next-token cross-entropy with every input row shifted by `shift`.
pub fn loss(w: &ModelWeights, ids: &[u32], shift: &[f64]) -> f64 {
    let cfg = w.config;
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let tok = to_mat(&w.token_embedding);
    let pos = to_mat(&w.position_embedding);
    let mut x: Mat = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|j| tok[id as usize][j] + pos[t][j] + shift[j]).collect())
        .collect();
    let n = x.len();
    for l in &w.layers {
        let h = norm(&x, &vec64(&l.ln1_gain), &vec64(&l.ln1_bias));
        let q = mm(&h, &to_mat(&l.wq));
        let k = mm(&h, &to_mat(&l.wk));
        let v = mm(&h, &to_mat(&l.wv));
        let mut attn = vec![vec![0.0; d]; n];
        for head in 0..cfg.n_heads {
            let c = head * dh..(head + 1) * dh;
            for i in 0..n {
                let s: Vec<f64> = (0..=i)
                    .map(|j| c.clone().map(|cc| q[i][cc] * k[j][cc]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for cc in c.clone() {
                        attn[i][cc] += ej / z * v[j][cc];
                    }
                }
            }
        }
        let o = mm(&attn, &to_mat(&l.wo));
        for i in 0..n {
            for j in 0..d {
                x[i][j] += o[i][j];
            }
        }
        let h2 = norm(&x, &vec64(&l.ln2_gain), &vec64(&l.ln2_bias));
        let mut u = mm(&h2, &to_mat(&l.w_up));
        for row in &mut u {
            for a in row.iter_mut() {
                *a = gelu(*a);
            }
        }
        let m = mm(&u, &to_mat(&l.w_down));
        for i in 0..n {
            for j in 0..d {
                x[i][j] += m[i][j];
            }
        }
    }
    let hf = norm(&x, &vec64(&w.final_gain), &vec64(&w.final_bias));
    let logits = mm(&hf, &to_mat(&w.output_projection));
    let mut total = 0.0;
    for t in 0..n - 1 {
        let row = &logits[t];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[ids[t + 1] as usize];
    }
    total / (n - 1) as f64
}

/// Central differences of [`loss`] along each coordinate of the common shift.
pub fn fd_gradient(w: &ModelWeights, ids: &[u32], h: f64) -> Vec<f64> {
    let d = w.config.d_model;
    (0..d)
        .map(|j| {
            let mut s = vec![0.0; d];
            s[j] = h;
            let up = loss(w, ids, &s);
            s[j] = -h;
            let down = loss(w, ids, &s);
            (up - down) / (2.0 * h)
        })
        .collect()
}
