//! Interpolated γ-norms of circuit ensembles.
//!
//! A minimizer decomposed into circuits `(c_i, L_i)` over a depth-`L`
//! network has norm
//!
//! ```text
//! ‖f‖_γ = m^-L · ‖ c_i (m/ε)^{L_i} ‖_{l^p},   p = 3 + 2γ
//! ```
//!
//! where `m` is the large per-layer mass (0.9 by default) and `ε` the small
//! one. γ = -1/2 recovers the RKHS norm and γ = -1 the Barron norm.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub const DEFAULT_MASS_BIG: f64 = 0.9;
const LIMIT_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("p must be positive, got {0}")]
    NonPositiveP(f64),
    #[error("gamma must exceed -3/2, got {0}")]
    GammaOutOfRange(f64),
    #[error("invalid ensemble: {0}")]
    Invalid(String),
    #[error("no candidate ensembles")]
    Empty,
    #[error("candidate {index} has total depth {found}, expected {expected}")]
    MismatchedDepth { index: usize, expected: u32, found: u32 },
    #[error("candidate {index} has eps {found}, expected {expected}")]
    MismatchedEps { index: usize, expected: f64, found: f64 },
    #[error("ensemble norm overflows f64 (log norm {0})")]
    Overflow(f64),
}

/// `(Σ|v_i|^p)^{1/p}`; a quasi-norm for `p < 1`. Zero for an empty vector.
pub fn lp_quasi_norm<T: Scalar>(v: &[T], p: T) -> Result<T, TheoryError> {
    if !(p > T::zero()) {
        return Err(TheoryError::NonPositiveP(p.f64()));
    }
    let scale = v.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    if scale == T::zero() {
        return Ok(T::zero());
    }
    let s: T = v.iter().map(|x| (x.abs() / scale).powf(p)).sum();
    Ok(scale * s.powf(T::one() / p))
}

/// Norm-interpolation exponent γ > -3/2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaExponent(f64);

impl GammaExponent {
    pub fn new(gamma: f64) -> Result<Self, TheoryError> {
        if gamma > -1.5 && gamma.is_finite() {
            Ok(Self(gamma))
        } else {
            Err(TheoryError::GammaOutOfRange(gamma))
        }
    }

    pub fn gamma(self) -> f64 {
        self.0
    }

    pub fn p(self) -> f64 {
        3.0 + 2.0 * self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Circuit {
    pub c: f64,
    #[serde(rename = "Li")]
    pub depth: u32,
}

fn default_mass_big() -> f64 {
    DEFAULT_MASS_BIG
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitEnsemble {
    #[serde(rename = "L")]
    pub depth: u32,
    pub eps: f64,
    #[serde(default = "default_mass_big")]
    pub mass_big: f64,
    pub circuits: Vec<Circuit>,
}

impl CircuitEnsemble {
    pub fn new(depth: u32, eps: f64, circuits: Vec<Circuit>) -> Self {
        Self {
            depth,
            eps,
            mass_big: DEFAULT_MASS_BIG,
            circuits,
        }
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let bad = |m: String| Err(TheoryError::Invalid(m));
        if self.depth == 0 {
            return bad("total depth L must be at least 1".into());
        }
        if self.circuits.is_empty() {
            return bad("no circuits".into());
        }
        if !(self.mass_big > 0.0 && self.mass_big <= 1.0) {
            return bad(format!("mass_big must lie in (0, 1], got {}", self.mass_big));
        }
        if !(self.eps > 0.0 && self.eps < self.mass_big) {
            return bad(format!("eps must lie in (0, mass_big), got {}", self.eps));
        }
        for (i, c) in self.circuits.iter().enumerate() {
            if !(c.c > 0.0 && c.c.is_finite()) {
                return bad(format!("circuit {i}: weight must be positive and finite, got {}", c.c));
            }
            if c.depth > self.depth {
                return bad(format!("circuit {i}: depth {} exceeds L = {}", c.depth, self.depth));
            }
        }
        Ok(())
    }

    /// The inner vector `c_i (m/ε)^{L_i}`, evaluated directly.
    pub fn terms(&self) -> Vec<f64> {
        let ratio = self.mass_big / self.eps;
        self.circuits.iter().map(|c| c.c * ratio.powi(c.depth as i32)).collect()
    }
}

/// Natural log of the ensemble norm. Finite for every valid ensemble.
pub fn ensemble_log_norm(e: &CircuitEnsemble, gamma: GammaExponent) -> Result<f64, TheoryError> {
    e.validate()?;
    let p = gamma.p();
    let log_ratio = (e.mass_big / e.eps).ln();
    let logs: Vec<f64> = e.circuits.iter().map(|c| c.c.ln() + c.depth as f64 * log_ratio).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + logs.iter().map(|l| (p * (l - top)).exp()).sum::<f64>().ln() / p;
    Ok(lse - e.depth as f64 * e.mass_big.ln())
}

/// `m^-L ‖c_i (m/ε)^{L_i}‖_{l^{3+2γ}}`, evaluated in log space.
pub fn ensemble_norm(e: &CircuitEnsemble, gamma: GammaExponent) -> Result<f64, TheoryError> {
    let log = ensemble_log_norm(e, gamma)?;
    let v = log.exp();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TheoryError::Overflow(log))
    }
}

/// Index of the minimum-norm candidate; ties go to the lowest index.
pub fn preferred_ensemble(candidates: &[CircuitEnsemble], gamma: GammaExponent) -> Result<usize, TheoryError> {
    let first = candidates.first().ok_or(TheoryError::Empty)?;
    let mut best = (0, f64::INFINITY);
    for (index, e) in candidates.iter().enumerate() {
        if e.depth != first.depth {
            return Err(TheoryError::MismatchedDepth {
                index,
                expected: first.depth,
                found: e.depth,
            });
        }
        if e.eps != first.eps {
            return Err(TheoryError::MismatchedEps {
                index,
                expected: first.eps,
                found: e.eps,
            });
        }
        let n = ensemble_log_norm(e, gamma)?;
        if n < best.1 {
            best = (index, n);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitLabel {
    Kernel,
    MeanField,
    Interpolated,
}

impl std::fmt::Display for LimitLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LimitLabel::Kernel => "kernel",
            LimitLabel::MeanField => "mean_field",
            LimitLabel::Interpolated => "interpolated",
        })
    }
}

/// Which classical function space the γ-norm coincides with.
pub fn limit_check(gamma: f64) -> Result<LimitLabel, TheoryError> {
    GammaExponent::new(gamma)?;
    Ok(if (gamma + 0.5).abs() <= LIMIT_TOL {
        LimitLabel::Kernel
    } else if (gamma + 1.0).abs() <= LIMIT_TOL {
        LimitLabel::MeanField
    } else {
        LimitLabel::Interpolated
    })
}

/// Weight given to each circuit of a dense-shallow ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DenseWeight {
    /// `c = 1/N`: total weight one.
    Uniform,
    /// `c = 1` for every circuit.
    Unit,
}

/// `N` depth-1 circuits.
pub fn dense_shallow(n: usize, depth: u32, eps: f64, weight: DenseWeight) -> CircuitEnsemble {
    let c = match weight {
        DenseWeight::Uniform => 1.0 / n as f64,
        DenseWeight::Unit => 1.0,
    };
    CircuitEnsemble::new(depth, eps, vec![Circuit { c, depth: 1 }; n])
}

/// One unit-weight circuit spanning all `depth` layers.
pub fn sparse_deep(depth: u32, eps: f64) -> CircuitEnsemble {
    CircuitEnsemble::new(depth, eps, vec![Circuit { c: 1.0, depth }])
}

/// Parameters at which the minimum-norm choice between the two shapes
/// changes from sparse-deep (at `gamma_small`) to dense-shallow (at
/// `gamma_large`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipInstance {
    pub n: usize,
    pub depth: u32,
    pub eps: f64,
    pub gamma_small: f64,
    pub gamma_large: f64,
    pub weight: DenseWeight,
}

pub const SWEEP_N: std::ops::RangeInclusive<usize> = 2..=64;
pub const SWEEP_DEPTH: std::ops::RangeInclusive<u32> = 2..=8;
pub const SWEEP_EPS: [f64; 3] = [1e-1, 1e-2, 1e-3];
pub const SWEEP_GAMMA: [f64; 2] = [-1.0, -0.5];

/// Exhaustive search, ordered by `N`, then `L`, then `ε`, then γ pair, for
/// every grid point where `[dense_shallow, sparse_deep]` picks index 1 at a
/// smaller γ and index 0 at a larger one.
pub fn sweep_flips(
    weight: DenseWeight,
    ns: impl IntoIterator<Item = usize>,
    depths: &[u32],
    epss: &[f64],
    gammas: &[f64],
) -> Result<Vec<FlipInstance>, TheoryError> {
    let gs: Vec<GammaExponent> = gammas.iter().map(|&g| GammaExponent::new(g)).collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for n in ns {
        for &depth in depths {
            for &eps in epss {
                let pair = [dense_shallow(n, depth, eps, weight), sparse_deep(depth, eps)];
                let picks: Vec<usize> = gs.iter().map(|&g| preferred_ensemble(&pair, g)).collect::<Result<_, _>>()?;
                for a in 0..gs.len() {
                    for b in 0..gs.len() {
                        if gs[a].gamma() < gs[b].gamma() && picks[a] == 1 && picks[b] == 0 {
                            out.push(FlipInstance {
                                n,
                                depth,
                                eps,
                                gamma_small: gs[a].gamma(),
                                gamma_large: gs[b].gamma(),
                                weight,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// [`sweep_flips`] over the standard grid.
pub fn standard_sweep(weight: DenseWeight) -> Result<Vec<FlipInstance>, TheoryError> {
    let depths: Vec<u32> = SWEEP_DEPTH.collect();
    sweep_flips(weight, SWEEP_N, &depths, &SWEEP_EPS, &SWEEP_GAMMA)
}
