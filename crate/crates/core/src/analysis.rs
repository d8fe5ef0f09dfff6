//! Measurement instruments: condensation degree, singular-value dominance,
//! embedding similarity, parameter norms, rank correlation and power-law
//! fits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Tensor;
use crate::model::{layer_param, ModelParams};
use crate::scalar::Scalar;

/// Rows with a smaller norm count as zero rows.
pub const ZERO_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("expected a 2-D matrix, got shape {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("matrix is all zeros")]
    ZeroMatrix,
    #[error("token id {id} appears twice")]
    DuplicateId { id: u32 },
    #[error("token id {id} is outside the {rows}-row table")]
    IdOutOfRange { id: u32, rows: usize },
    #[error("need at least {need} items, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("rank correlation undefined: {0} is constant")]
    Constant(&'static str),
    #[error("sizes must be distinct")]
    NonDistinctSizes,
    #[error("sizes and losses must be positive and finite")]
    NonPositive,
    #[error("unknown metric `{0}` (expected dc or ds)")]
    UnknownMetric(String),
    #[error("missing matrix `{0}`")]
    MissingMatrix(String),
}

fn rows_of<T: Scalar>(w: &Tensor<T>) -> Result<(usize, usize), AnalysisError> {
    match *w.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(AnalysisError::NotMatrix(w.shape().to_vec())),
    }
}

/// Condensation degree of a `d_in × d_out` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condensation {
    /// `(1/(d_in·d_out)) Σ_{i,j} cos(W_i, W_j)` over all ordered row pairs,
    /// including `i = j`.
    pub literal: f64,
    /// The same double sum divided by the number of contributing pairs
    /// (nonzero rows squared): the mean pairwise row cosine.
    pub pair_mean: f64,
}

/// Pairwise row-cosine condensation. Rows with norm below
/// [`ZERO_ROW_NORM`] contribute zero to every pair involving them.
pub fn condensation_dc<T: Scalar>(w: &Tensor<T>) -> Result<Condensation, AnalysisError> {
    let (rows, cols) = rows_of(w)?;
    // Σ_{i,j} u_i·u_j = |Σ_i u_i|² for unit rows u_i.
    let mut acc = vec![0.0f64; cols];
    let mut nonzero = 0usize;
    for i in 0..rows {
        let row = &w.data()[i * cols..(i + 1) * cols];
        let norm = row.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
        if norm < ZERO_ROW_NORM {
            continue;
        }
        nonzero += 1;
        for (a, x) in acc.iter_mut().zip(row) {
            *a += x.f64() / norm;
        }
    }
    let total: f64 = acc.iter().map(|a| a * a).sum();
    Ok(Condensation {
        literal: total / (rows * cols) as f64,
        pair_mean: if nonzero == 0 {
            0.0
        } else {
            total / (nonzero * nonzero) as f64
        },
    })
}

/// Singular values in descending order (one-sided Jacobi).
pub fn singular_values<T: Scalar>(w: &Tensor<T>) -> Result<Vec<f64>, AnalysisError> {
    let (rows, cols) = rows_of(w)?;
    // Orthogonalize the columns of whichever orientation has fewer of them.
    let (m, n, mut cols_data) = if cols <= rows {
        let c: Vec<Vec<f64>> = (0..cols)
            .map(|j| (0..rows).map(|i| w.data()[i * cols + j].f64()).collect())
            .collect();
        (rows, cols, c)
    } else {
        let c: Vec<Vec<f64>> = (0..rows)
            .map(|i| w.data()[i * cols..(i + 1) * cols].iter().map(|x| x.f64()).collect())
            .collect();
        (cols, rows, c)
    };
    let _ = m;
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (a, b) = (&cols_data[p], &cols_data[q]);
                    let mut s = (0.0, 0.0, 0.0);
                    for (x, y) in a.iter().zip(b) {
                        s.0 += x * x;
                        s.1 += y * y;
                        s.2 += x * y;
                    }
                    s
                };
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols_data.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols_data
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Largest singular value over the sum of all singular values, in
/// `[1/min(d_in, d_out), 1]`.
pub fn dominance_ds<T: Scalar>(w: &Tensor<T>) -> Result<f64, AnalysisError> {
    let sv = singular_values(w)?;
    let total: f64 = sv.iter().sum();
    if total == 0.0 {
        return Err(AnalysisError::ZeroMatrix);
    }
    Ok(sv[0] / total)
}

/// Cosine similarity between the embedding rows `ids`, as a `K × K` matrix.
/// A zero row has zero similarity with everything, itself included.
pub fn embedding_similarity<T: Scalar>(embedding: &Tensor<T>, ids: &[u32]) -> Result<Tensor<f64>, AnalysisError> {
    let (rows, cols) = rows_of(embedding)?;
    if ids.len() < 2 {
        return Err(AnalysisError::TooFew { need: 2, got: ids.len() });
    }
    let mut seen = std::collections::HashSet::new();
    for &id in ids {
        if id as usize >= rows {
            return Err(AnalysisError::IdOutOfRange { id, rows });
        }
        if !seen.insert(id) {
            return Err(AnalysisError::DuplicateId { id });
        }
    }
    let unit: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let r: Vec<f64> = embedding.row(id as usize).iter().map(|x| x.f64()).collect();
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < ZERO_ROW_NORM {
                vec![0.0; cols]
            } else {
                r.iter().map(|x| x / n).collect()
            }
        })
        .collect();
    let k = ids.len();
    let mut out = vec![0.0; k * k];
    for a in 0..k {
        for b in a..k {
            let c = if a == b && unit[a].iter().any(|&x| x != 0.0) {
                1.0
            } else {
                unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum()
            };
            out[a * k + b] = c;
            out[b * k + a] = c;
        }
    }
    Ok(Tensor::new(vec![k, k], out).expect("k×k"))
}

/// Mean of the off-diagonal entries of a square matrix.
pub fn mean_off_diagonal(m: &Tensor<f64>) -> f64 {
    let k = m.shape()[0];
    let mut s = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                s += m.data()[a * k + b];
            }
        }
    }
    s / (k * (k - 1)) as f64
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(AnalysisError::TooFew { need: 3, got: xs.len() });
    }
    if xs.iter().all(|&x| x == xs[0]) {
        return Err(AnalysisError::Constant("xs"));
    }
    if ys.iter().all(|&y| y == ys[0]) {
        return Err(AnalysisError::Constant("ys"));
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormProfile {
    pub global: f64,
    pub per_tensor: BTreeMap<String, f64>,
}

/// Frobenius norm of every tensor (1-D gains included) and the global L2
/// norm over all of them.
pub fn param_norm_profile<T: Scalar>(tensors: &BTreeMap<String, Tensor<T>>) -> NormProfile {
    let per_tensor: BTreeMap<String, f64> = tensors
        .iter()
        .map(|(k, t)| (k.clone(), t.data().iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt()))
        .collect();
    let global = per_tensor.values().map(|n| n * n).sum::<f64>().sqrt();
    NormProfile { global, per_tensor }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub size: f64,
    pub loss: f64,
}

/// `loss ≈ A · size^(-alpha) + floor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    #[serde(rename = "A")]
    pub amplitude: f64,
    pub alpha: f64,
    pub floor: Option<f64>,
    /// Root-mean-square of `ln loss - ln fit`.
    pub residual: f64,
}

impl PowerFit {
    pub fn predict(&self, size: f64) -> f64 {
        self.amplitude * size.powf(-self.alpha) + self.floor.unwrap_or(0.0)
    }
}

/// Ordinary least squares `y = a + b·x`; returns `(a, b)`.
fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let b = sxy / sxx;
    (my - b * mx, b)
}

fn fit_with_floor(points: &[ScalingPoint], floor: f64) -> PowerFit {
    let lx: Vec<f64> = points.iter().map(|p| p.size.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| (p.loss - floor).ln()).collect();
    let (a, b) = ols(&lx, &ly);
    let mut fit = PowerFit {
        amplitude: a.exp(),
        alpha: -b,
        floor: Some(floor),
        residual: 0.0,
    };
    let ss: f64 = points.iter().map(|p| (p.loss.ln() - fit.predict(p.size).ln()).powi(2)).sum();
    fit.residual = (ss / points.len() as f64).sqrt();
    fit
}

/// Fits `A·size^(-alpha)` by least squares in log-log space, or with
/// `with_floor` also an additive floor in `[0, min loss)` chosen by a grid
/// search refined by golden-section search on the log-space residual.
pub fn fit_power_law(points: &[ScalingPoint], with_floor: bool) -> Result<PowerFit, AnalysisError> {
    let need = if with_floor { 4 } else { 3 };
    if points.len() < need {
        return Err(AnalysisError::TooFew { need, got: points.len() });
    }
    if points
        .iter()
        .any(|p| !(p.size > 0.0 && p.loss > 0.0 && p.size.is_finite() && p.loss.is_finite()))
    {
        return Err(AnalysisError::NonPositive);
    }
    let mut sizes: Vec<f64> = points.iter().map(|p| p.size).collect();
    sizes.sort_by(f64::total_cmp);
    if sizes.windows(2).any(|w| w[0] == w[1]) {
        return Err(AnalysisError::NonDistinctSizes);
    }

    if !with_floor {
        let mut fit = fit_with_floor(points, 0.0);
        fit.floor = None;
        return Ok(fit);
    }

    let min_loss = points.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
    const GRID: usize = 400;
    let at = |i: usize| min_loss * i as f64 / GRID as f64;
    let best = (0..GRID)
        .min_by(|&a, &b| {
            fit_with_floor(points, at(a))
                .residual
                .total_cmp(&fit_with_floor(points, at(b)).residual)
        })
        .unwrap();
    // golden-section refinement on the neighbouring grid cells
    let (mut lo, mut hi) = (at(best.saturating_sub(1)), at((best + 1).min(GRID)) * (1.0 - 1e-12));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let f = |x: f64| fit_with_floor(points, x).residual;
    let (mut c, mut d) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..100 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = f(d);
        }
    }
    let refined = fit_with_floor(points, (lo + hi) / 2.0);
    let grid_best = fit_with_floor(points, at(best));
    Ok(if refined.residual <= grid_best.residual {
        refined
    } else {
        grid_best
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Dc,
    Ds,
}

impl FromStr for Metric {
    type Err = AnalysisError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dc" => Ok(Metric::Dc),
            "ds" => Ok(Metric::Ds),
            other => Err(AnalysisError::UnknownMetric(other.to_string())),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Dc => "dc",
            Metric::Ds => "ds",
        })
    }
}

impl Metric {
    pub fn eval<T: Scalar>(self, w: &Tensor<T>) -> Result<f64, AnalysisError> {
        match self {
            Metric::Dc => Ok(condensation_dc(w)?.literal),
            Metric::Ds => dominance_ds(w),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerValue {
    pub layer: usize,
    /// `"wq"` or `"wk"`.
    pub matrix: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub metric: Metric,
    /// Ordered by matrix family (`wq` then `wk`), then by layer.
    pub rows: Vec<LayerValue>,
}

impl LayerProfile {
    pub fn values(&self, matrix: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.matrix == matrix).map(|r| r.value).collect()
    }

    pub fn mean(&self) -> f64 {
        self.rows.iter().map(|r| r.value).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// `layer,matrix,metric,value` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,matrix,metric,value\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:.8e}\n", r.layer, r.matrix, self.metric, r.value));
        }
        s
    }
}

/// `metric` of every layer's query and key projection.
pub fn layer_profile<T: Scalar>(params: &ModelParams<T>, metric: Metric) -> Result<LayerProfile, AnalysisError> {
    let mut rows = Vec::new();
    for family in ["wq", "wk"] {
        for layer in 0..params.config.n_layers {
            let name = layer_param(layer, family);
            let w = params.get(&name).ok_or(AnalysisError::MissingMatrix(name))?;
            rows.push(LayerValue {
                layer,
                matrix: family.to_string(),
                value: metric.eval(w)?,
            });
        }
    }
    Ok(LayerProfile { metric, rows })
}

/// Dense CSV of a square similarity matrix, with the token ids as header.
pub fn similarity_csv(ids: &[u32], sim: &Tensor<f64>) -> String {
    let k = ids.len();
    let mut s = String::from("token");
    for id in ids {
        s.push_str(&format!(",{id}"));
    }
    s.push('\n');
    for a in 0..k {
        s.push_str(&ids[a].to_string());
        for b in 0..k {
            s.push_str(&format!(",{:.8e}", sim.data()[a * k + b]));
        }
        s.push('\n');
    }
    s
}
