//! Plain-`Vec` reference math for oracle comparisons. Nothing here touches
//! the graph, so a bug in an op cannot hide behind the same bug here.
#![allow(dead_code)]

use dafss_tensor::{ParamId, ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| (0..c).map(|j| t.at(i, j)).collect()).collect()
}

pub fn param(store: &ParamStore, id: ParamId) -> Mat {
    let t = store.value(id);
    if t.rank() == 1 {
        vec![t.data().to_vec()]
    } else {
        mat(t)
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn add_row(a: &Mat, r: &[f64]) -> Mat {
    a.iter().map(|row| row.iter().zip(r).map(|(x, y)| x + y).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn layer_norm(a: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| (p - q).abs() <= tol)
        })
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Core errors surfaced through the gradient checker's error type.
pub fn wrap(e: dafss_core::error::CoreError) -> dafss_tensor::TensorError {
    dafss_tensor::TensorError::Graph(e.to_string())
}
