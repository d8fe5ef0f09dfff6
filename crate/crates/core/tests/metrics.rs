//! Analysis instruments against independent oracles.

mod common;

use cclab::analysis::{average_ranks, condensation_dc, dominance_ds, fit_power_law, singular_values, spearman, ScalingPoint};
use cclab::engine::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use common::oracles::{brute_pearson, brute_ranks, eigen_singular_values};

fn random_matrix(rng: &mut ChaCha8Rng) -> Tensor {
    let r = rng.random_range(1..=32);
    let c = rng.random_range(1..=32);
    Tensor::from_fn(&[r, c], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn dominance_matches_eigendecomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..200 {
        let w = random_matrix(&mut rng);
        let s = eigen_singular_values(&w);
        let want = s[0] / s.iter().sum::<f64>();
        let got = dominance_ds(&w).unwrap();
        assert!((got - want).abs() < 1e-8, "matrix {i} {:?}: {got} vs {want}", w.shape());
        let sv = singular_values(&w).unwrap();
        for (a, b) in sv.iter().zip(&s) {
            assert!((a - b).abs() < 1e-8 * (1.0 + b));
        }
    }
}

#[test]
fn dominance_of_low_rank_and_scaled_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rank1 = Tensor::from_fn(&[9, 6], |k| u[k / 6] * v[k % 6]);
    assert!((dominance_ds(&rank1).unwrap() - 1.0).abs() < 1e-10);
    let w = random_matrix(&mut rng);
    let scaled = w.scale(37.5);
    assert!((dominance_ds(&w).unwrap() - dominance_ds(&scaled).unwrap()).abs() < 1e-12);
}

#[test]
fn condensation_matches_pairwise_cosines() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let w = random_matrix(&mut rng);
        let (r, c) = (w.shape()[0], w.shape()[1]);
        let row = |i: usize| &w.data()[i * c..(i + 1) * c];
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut total = 0.0;
        for i in 0..r {
            for j in 0..r {
                let dot: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
                total += dot / (norm(row(i)) * norm(row(j)));
            }
        }
        let dc = condensation_dc(&w).unwrap();
        assert!((dc.literal - total / (r * c) as f64).abs() < 1e-10);
        assert!((dc.pair_mean - total / (r * r) as f64).abs() < 1e-10);
    }
}

#[test]
fn spearman_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(3..40);
        let tied = done % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| if tied { rng.random_range(0..5) as f64 } else { rng.random_range(-1.0..1.0) })
                .collect()
        };
        let xs = draw(&mut rng);
        let ys = draw(&mut rng);
        if xs.iter().all(|&x| x == xs[0]) || ys.iter().all(|&y| y == ys[0]) {
            continue;
        }
        let (rx, ry) = (brute_ranks(&xs), brute_ranks(&ys));
        assert_eq!(average_ranks(&xs), rx);
        assert_eq!(average_ranks(&ys), ry);
        let want = brute_pearson(&rx, &ry);
        let got = spearman(&xs, &ys).unwrap();
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        done += 1;
    }
}

#[test]
fn power_law_exponent_recovery() {
    let sizes: Vec<f64> = (0..20).map(|i| 1e6 * 10f64.powf(i as f64 / 8.0)).collect();
    let exact: Vec<ScalingPoint> = sizes.iter().map(|&n| ScalingPoint { size: n, loss: 12.0 * n.powf(-0.076) }).collect();
    let fit = fit_power_law(&exact, false).unwrap();
    assert!((fit.alpha - 0.076).abs() < 1e-9);

    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut alphas: Vec<f64> = (0..100)
        .map(|_| {
            let pts: Vec<ScalingPoint> = sizes
                .iter()
                .map(|&n| ScalingPoint { size: n, loss: 12.0 * n.powf(-0.3) * (1.0 + noise.sample(&mut rng)) })
                .collect();
            fit_power_law(&pts, false).unwrap().alpha
        })
        .collect();
    alphas.sort_by(f64::total_cmp);
    let median = (alphas[49] + alphas[50]) / 2.0;
    assert!((median / 0.3 - 1.0).abs() < 0.05, "median {median}");
}

#[test]
fn power_law_with_floor_recovery() {
    let pts: Vec<ScalingPoint> = (0..12)
        .map(|i| {
            let n = 1e3 * 2f64.powi(i);
            ScalingPoint { size: n, loss: 30.0 * n.powf(-0.5) + 1.7 }
        })
        .collect();
    let fit = fit_power_law(&pts, true).unwrap();
    assert!((fit.floor.unwrap() - 1.7).abs() < 1e-4, "{fit:?}");
    assert!((fit.alpha - 0.5).abs() < 1e-3);
}
