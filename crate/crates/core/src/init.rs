//! Initialization schemes for weight matrices.
//!
//! `GammaRate(γ)` draws every entry of a `d_in × d_out` matrix from
//! `N(0, (d_in^-γ)²)`, so the initialization scale shrinks as γ grows.
//! `FixedStd(σ)` uses the same σ for every matrix regardless of shape.
//! Norm gains and other 1-D parameters are left untouched by both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Tensor;
use crate::model::{ModelParams, TOKEN_EMBEDDING};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum InitError {
    #[error("fixed std must be positive and finite, got {0}")]
    BadStd(f64),
    #[error("initialization rate must be finite, got {0}")]
    BadRate(f64),
    #[error("matrix extents must be positive, got {0}×{1}")]
    BadExtent(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitKind {
    GammaRate(f64),
    FixedStd(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub kind: InitKind,
    pub seed: u64,
}

impl InitScheme {
    pub fn gamma(gamma: f64, seed: u64) -> Self {
        Self {
            kind: InitKind::GammaRate(gamma),
            seed,
        }
    }

    pub fn fixed_std(sigma: f64, seed: u64) -> Self {
        Self {
            kind: InitKind::FixedStd(sigma),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), InitError> {
        match self.kind {
            InitKind::GammaRate(g) if !g.is_finite() => Err(InitError::BadRate(g)),
            InitKind::FixedStd(s) if !(s > 0.0 && s.is_finite()) => Err(InitError::BadStd(s)),
            _ => Ok(()),
        }
    }

    /// Target standard deviation for a matrix whose scaling dimension is
    /// `fan_in`.
    pub fn std_for(&self, fan_in: usize) -> f64 {
        match self.kind {
            InitKind::GammaRate(g) => gamma_std(fan_in, g),
            InitKind::FixedStd(s) => s,
        }
    }
}

/// `d_in^-γ`.
pub fn gamma_std(d_in: usize, gamma: f64) -> f64 {
    (d_in as f64).powf(-gamma)
}

fn normal_matrix<T: Scalar>(d_in: usize, d_out: usize, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(&[d_in, d_out], |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::of(z * std)
    })
}

/// `d_in × d_out` matrix with i.i.d. `N(0, (d_in^-γ)²)` entries.
pub fn gamma_init<T: Scalar>(d_in: usize, d_out: usize, gamma: f64, rng: &mut impl Rng) -> Result<Tensor<T>, InitError> {
    if d_in == 0 || d_out == 0 {
        return Err(InitError::BadExtent(d_in, d_out));
    }
    if !gamma.is_finite() {
        return Err(InitError::BadRate(gamma));
    }
    Ok(normal_matrix(d_in, d_out, gamma_std(d_in, gamma), rng))
}

/// `d_in × d_out` matrix with i.i.d. `N(0, σ²)` entries.
pub fn fixed_std_init<T: Scalar>(d_in: usize, d_out: usize, sigma: f64, rng: &mut impl Rng) -> Result<Tensor<T>, InitError> {
    if d_in == 0 || d_out == 0 {
        return Err(InitError::BadExtent(d_in, d_out));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(InitError::BadStd(sigma));
    }
    Ok(normal_matrix(d_in, d_out, sigma, rng))
}

/// Deterministic per-matrix generator: the scheme seed selects the key,
/// the FNV-1a hash of the matrix name selects the stream.
pub fn matrix_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Scaling dimension used for a named matrix: its row count (fan-in),
/// except the token embedding, which is a lookup table and uses `d_model`.
pub fn scaling_dim(name: &str, shape: &[usize]) -> usize {
    if name == TOKEN_EMBEDDING {
        shape[1]
    } else {
        shape[0]
    }
}

/// Initializes every 2-D weight matrix of `params` under `scheme`.
pub fn apply_scheme<T: Scalar>(params: &mut ModelParams<T>, scheme: &InitScheme) -> Result<(), InitError> {
    scheme.validate()?;
    for (name, t) in params.tensors.iter_mut() {
        if t.ndim() != 2 {
            continue;
        }
        let (d_in, d_out) = (t.shape()[0], t.shape()[1]);
        let std = scheme.std_for(scaling_dim(name, t.shape()));
        *t = normal_matrix(d_in, d_out, std, &mut matrix_rng(scheme.seed, name));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample_std(t: &Tensor) -> f64 {
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        (t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    #[test]
    fn gamma_zero_is_unit_std() {
        assert_eq!(gamma_std(12345, 0.0), 1.0);
        assert!((gamma_std(100, 1.0) - 0.01).abs() < 1e-18);
        assert_eq!(gamma_std(256, 0.5), 0.0625);
    }

    #[test]
    fn fixed_std_rejects_nonpositive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(fixed_std_init::<f64>(2, 2, 0.0, &mut rng), Err(InitError::BadStd(0.0)));
        assert_eq!(fixed_std_init::<f64>(2, 2, -1.0, &mut rng), Err(InitError::BadStd(-1.0)));
        assert!(InitScheme::fixed_std(0.0, 1).validate().is_err());
        assert!(InitScheme::gamma(f64::NAN, 1).validate().is_err());
    }

    #[test]
    fn same_seed_same_tensor() {
        let a: Tensor = fixed_std_init(8, 8, 0.02, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b: Tensor = fixed_std_init(8, 8, 0.02, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn apply_scheme_uses_per_matrix_fan_in() {
        let cfg = ModelConfig::new(1, 64, 4, 4, 16, 256, 16);
        let mut p = ModelParams::<f64>::build(&cfg).unwrap();
        apply_scheme(&mut p, &InitScheme::gamma(0.5, 3)).unwrap();
        let h = cfg.mlp_hidden();
        let down = p.get("layers.0.w_down").unwrap();
        assert!((sample_std(down) / (h as f64).powf(-0.5) - 1.0).abs() < 0.05);
        let emb = p.get(TOKEN_EMBEDDING).unwrap();
        assert!((sample_std(emb) / 64f64.powf(-0.5) - 1.0).abs() < 0.05);
        assert!(p.get("layers.0.attn_norm").unwrap().data().iter().all(|&g| g == 1.0));
        // distinct matrices get distinct streams
        assert_ne!(p.get("layers.0.w_gate").unwrap(), p.get("layers.0.w_up").unwrap());
    }

    #[test]
    fn fixed_std_is_shape_independent() {
        let cfg = ModelConfig::new(1, 64, 4, 4, 16, 256, 16);
        let mut p = ModelParams::<f64>::build(&cfg).unwrap();
        apply_scheme(&mut p, &InitScheme::fixed_std(0.02, 3)).unwrap();
        for name in ["layers.0.wq", "layers.0.w_down", TOKEN_EMBEDDING, "lm_head"] {
            let s = sample_std(p.get(name).unwrap());
            assert!((s / 0.02 - 1.0).abs() < 0.05, "{name}: {s}");
        }
    }

    #[test]
    fn apply_scheme_is_deterministic() {
        let cfg = ModelConfig::new(2, 16, 2, 1, 8, 32, 8);
        let mut a = ModelParams::<f64>::build(&cfg).unwrap();
        let mut b = ModelParams::<f64>::build(&cfg).unwrap();
        apply_scheme(&mut a, &InitScheme::gamma(1.0, 77)).unwrap();
        apply_scheme(&mut b, &InitScheme::gamma(1.0, 77)).unwrap();
        assert_eq!(a, b);
    }
}
