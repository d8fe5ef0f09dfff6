#![allow(dead_code)]

pub mod gradcases;
pub mod oracles;

use cclab::config::TrainConfig;

/// Thirty-two states over the bytes `@.._`. From state `i` the next state is
/// drawn from a Zipf law over all states with probability 0.8, and is `i+1`
/// otherwise, so token frequencies are strongly unequal.
pub fn zipf_chain() -> serde_json::Value {
    let n = 32;
    let z: f64 = (1..=n).map(|j| 1.0 / j as f64).sum();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| 0.8 / ((j + 1) as f64 * z) + if j == (i + 1) % n { 0.2 } else { 0.0 })
                .collect()
        })
        .collect();
    let symbols: Vec<u32> = (0..n as u32).map(|s| b'@' as u32 + s).collect();
    serde_json::json!({ "transitions": rows, "symbols": symbols })
}

/// Two-layer, width-64 byte-vocabulary model on the Zipf chain.
pub fn contrast_config(gamma: f64, lambda: f64, steps: u64) -> TrainConfig {
    let mut synth = zipf_chain();
    synth["length"] = serde_json::json!(200_000);
    synth["seed"] = serde_json::json!(11);
    let doc = serde_json::json!({
        "model": {"n_layers": 2, "d_model": 64, "n_heads": 4, "n_kv_heads": 2, "head_dim": 16,
                  "vocab_size": 256, "max_seq_len": 64},
        "init": {"kind": "gamma", "value": gamma, "seed": 7},
        "optim": {"lr_max": 3e-3, "lr_min": 3e-4, "warmup_frac": 0.05, "beta1": 0.9,
                  "beta2": 0.95, "lambda": lambda, "total_steps": steps},
        "data": {"synth": synth, "batch": 16, "seq_len": 32, "holdout": 0.05, "eval_windows": 32},
        "logging": {"log_every": 100, "checkpoint_every": 0, "out_dir": "unused"},
        "seed": 13
    });
    TrainConfig::from_json(&doc.to_string()).expect("contrast config is valid")
}

/// Three-state chain with conditional entropy ≈ 0.8315 nats.
pub fn three_state_config(steps: u64) -> TrainConfig {
    let doc = serde_json::json!({
        "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "n_kv_heads": 1, "head_dim": 8,
                  "vocab_size": 3, "max_seq_len": 32},
        "init": {"kind": "gamma", "value": 0.5, "seed": 1},
        "optim": {"lr_max": 1e-2, "lr_min": 1e-3, "warmup_frac": 0.05, "beta1": 0.9,
                  "beta2": 0.95, "lambda": 0.1, "total_steps": steps},
        "data": {"synth": {"transitions": [[0.0, 0.6, 0.4], [0.6, 0.0, 0.4], [0.3, 0.2, 0.5]],
                           "length": 60_000, "seed": 2},
                 "batch": 16, "seq_len": 32, "holdout": 0.1, "eval_windows": 64},
        "logging": {"log_every": 100, "checkpoint_every": 0, "out_dir": "unused"},
        "seed": 3
    });
    TrainConfig::from_json(&doc.to_string()).expect("three-state config is valid")
}

/// Kolmogorov–Smirnov statistic of `xs` against the standard normal.
pub fn ks_standard_normal(xs: &mut [f64]) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n01 = Normal::new(0.0, 1.0).unwrap();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = n01.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic critical value of the one-sample KS statistic at α = 0.01.
pub fn ks_critical_01(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
