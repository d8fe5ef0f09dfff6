//! Distributional checks of the initialization schemes.

mod common;

use cclab::init::{apply_scheme, fixed_std_init, gamma_init, matrix_rng, InitScheme};
use cclab::model::{ModelConfig, ModelParams, TOKEN_EMBEDDING};
use common::{ks_critical_01, ks_standard_normal, mean_std};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn standardized_draws_pass_ks() {
    for (i, (d_in, gamma)) in [(256, 0.5), (100, 1.0), (64, 0.1), (7, 0.0), (1000, 0.75)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let w = gamma_init::<f64>(d_in, 100_000usize.div_ceil(d_in), gamma, &mut rng).unwrap();
        let target = (d_in as f64).powf(-gamma);
        let mut z: Vec<f64> = w.data()[..100_000].iter().map(|x| x / target).collect();
        let d = ks_standard_normal(&mut z);
        assert!(d < ks_critical_01(z.len()), "d_in {d_in} gamma {gamma}: D = {d}");
    }
}

#[test]
fn fixed_std_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = fixed_std_init::<f64>(1000, 1000, 0.02, &mut rng).unwrap();
    let (_, s) = mean_std(w.data());
    assert!((s / 0.02 - 1.0).abs() < 0.02);
    let w = fixed_std_init::<f64>(1000, 1000, 1.0, &mut rng).unwrap();
    let (m, _) = mean_std(w.data());
    assert!(m.abs() < 0.005);
}

#[test]
fn frobenius_norm_falls_with_gamma() {
    let cfg = ModelConfig::new(2, 64, 4, 2, 16, 256, 32);
    let mut prev: Option<Vec<f64>> = None;
    for gamma in [0.1, 0.3, 0.5, 0.75, 1.0] {
        let mut p = ModelParams::<f64>::build(&cfg).unwrap();
        apply_scheme(&mut p, &InitScheme::gamma(gamma, 5)).unwrap();
        let norms: Vec<f64> = p.matrix_names().map(|n| p.get(n).unwrap().norm()).collect();
        for (name, &nrm) in p.matrix_names().zip(&norms) {
            let s = p.get(name).unwrap().shape();
            let d_in = if name == TOKEN_EMBEDDING { s[1] } else { s[0] };
            let expect = (d_in as f64).powf(-gamma) * ((s[0] * s[1]) as f64).sqrt();
            assert!((nrm / expect - 1.0).abs() < 0.05, "{name} gamma {gamma}: {nrm} vs {expect}");
        }
        if let Some(prev) = prev {
            assert!(norms.iter().zip(&prev).all(|(a, b)| a < b));
        }
        prev = Some(norms);
    }
}

#[test]
fn matrix_streams_are_independent_of_order() {
    let a: Vec<f64> = gamma_init::<f64>(8, 8, 0.5, &mut matrix_rng(3, "layers.0.wq")).unwrap().into_data();
    let _ = gamma_init::<f64>(8, 8, 0.5, &mut matrix_rng(3, "layers.0.wk")).unwrap();
    let b: Vec<f64> = gamma_init::<f64>(8, 8, 0.5, &mut matrix_rng(3, "layers.0.wq")).unwrap().into_data();
    assert_eq!(a, b);
    let c: Vec<f64> = gamma_init::<f64>(8, 8, 0.5, &mut matrix_rng(3, "layers.0.wk")).unwrap().into_data();
    assert_ne!(a, c);
}
