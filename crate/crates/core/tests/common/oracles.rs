//! Independent reference implementations.

use cclab::engine::Tensor;
use nalgebra::DMatrix;

/// Scalar AdamW: moments, bias correction, then `θ - C·m̂/(√v̂+ε) - λ·C·θ`.
pub fn adamw_reference(theta0: f64, grads: &[f64], lr: f64, lambda: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut out = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        theta = theta - lr * mh / (vh.sqrt() + eps) - lambda * lr * theta;
        out.push(theta);
    }
    out
}

/// Singular values from the eigenvalues of WᵀW, descending. Eigenvalues
/// below the numerical-rank threshold `n·ε·λ_max` count as zero.
pub fn eigen_singular_values(w: &Tensor) -> Vec<f64> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    let m = DMatrix::from_row_slice(r, c, w.data());
    let gram = m.transpose() * &m;
    let eig = gram.symmetric_eigenvalues();
    let cut = c as f64 * f64::EPSILON * eig.iter().fold(0.0f64, |a, &e| a.max(e.abs()));
    let mut s: Vec<f64> = eig.iter().map(|&e| if e > cut { e.sqrt() } else { 0.0 }).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Average ranks (1-based) by counting.
pub fn brute_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}
