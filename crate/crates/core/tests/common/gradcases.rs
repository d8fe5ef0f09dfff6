//! Gradient-check cases: every engine primitive and a one-layer model,
//! each over 20 seeds with inputs drawn from [-1, 1].

use std::collections::BTreeMap;

use cclab::engine::{grad_check, GradCheckOptions, Graph, NodeId, Tensor};
use cclab::init::{apply_scheme, InitScheme};
use cclab::model::{bindings, ModelConfig, ModelGraph, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 20;

pub struct Case {
    pub g: Graph,
    pub b: BTreeMap<String, Tensor>,
}

impl Case {
    pub fn new() -> Self {
        Case {
            g: Graph::new(),
            b: BTreeMap::new(),
        }
    }

    pub fn param(&mut self, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> NodeId {
        self.b.insert(name.into(), uniform(rng, shape));
        self.g.param(name, shape).unwrap()
    }

    pub fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.b.insert(name.into(), value);
        self.g.input(name, &shape).unwrap()
    }

    /// Scalar loss `sum(out ⊙ R)` with a fixed random weight `R`, so that
    /// every output entry contributes with a distinct coefficient.
    pub fn finish(mut self, rng: &mut ChaCha8Rng, out: NodeId) -> (Self, NodeId) {
        let shape = self.g.shape(out).to_vec();
        let r = self.input("__weight", uniform(rng, &shape));
        let prod = self.g.mul(out, r).unwrap();
        let loss = self.g.sum(prod);
        (self, loss)
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub type Build = fn(&mut ChaCha8Rng) -> (Case, NodeId);

/// Checks `build` over every seed; the error names the first failure.
pub fn run(name: &str, build: Build) -> Result<(), String> {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (case, loss) = build(&mut rng);
        let report = grad_check(&case.g, &case.b, loss, GradCheckOptions::default()).map_err(|e| e.to_string())?;
        if !report.passed() {
            return Err(format!(
                "{name}, seed {seed}: failing {:?}, worst {:.3e}",
                report.failing(),
                report.worst()
            ));
        }
    }
    Ok(())
}

/// Every primitive, grouped as matmul, elementwise, row-wise and layout.
pub fn primitives() -> Vec<(&'static str, Build)> {
    vec![
        ("matmul 2d", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[3, 4]);
            let b = c.param(rng, "b", &[4, 5]);
            let o = c.g.matmul(a, b).unwrap();
            c.finish(rng, o)
        }),
        ("matmul shared rhs", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[2, 3, 4]);
            let b = c.param(rng, "b", &[4, 2]);
            let o = c.g.matmul(a, b).unwrap();
            c.finish(rng, o)
        }),
        ("matmul batched", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[2, 2, 3, 4]);
            let b = c.param(rng, "b", &[2, 2, 4, 3]);
            let o = c.g.matmul(a, b).unwrap();
            c.finish(rng, o)
        }),
        ("add broadcast", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[2, 3, 4]);
            let b = c.param(rng, "b", &[4]);
            let o = c.g.add(a, b).unwrap();
            c.finish(rng, o)
        }),
        ("mul broadcast", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[3, 4]);
            let b = c.param(rng, "b", &[4]);
            let o = c.g.mul(a, b).unwrap();
            c.finish(rng, o)
        }),
        ("mul same shape", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[3, 4]);
            let b = c.param(rng, "b", &[3, 4]);
            let o = c.g.mul(a, b).unwrap();
            c.finish(rng, o)
        }),
        ("scale", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[5]);
            let o = c.g.scale(a, -2.5);
            c.finish(rng, o)
        }),
        ("silu", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[4, 3]);
            let o = c.g.silu(a);
            c.finish(rng, o)
        }),
        ("sigmoid", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[4, 3]);
            let o = c.g.sigmoid(a);
            c.finish(rng, o)
        }),
        ("sum", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[2, 3]);
            let s = c.g.sum(a);
            let s2 = c.g.mul(s, s).unwrap();
            let o = c.g.sum(s2);
            (c, o)
        }),
        ("softmax", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[3, 5]);
            let o = c.g.softmax(a);
            c.finish(rng, o)
        }),
        ("rms_norm", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[3, 6]);
            let o = c.g.rms_norm(a);
            c.finish(rng, o)
        }),
        ("rope", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[2, 5, 6]);
            let o = c.g.rope(a, 100.0).unwrap();
            c.finish(rng, o)
        }),
        ("causal_mask then softmax", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[2, 4, 4]);
            let m = c.g.causal_mask(a).unwrap();
            let o = c.g.softmax(m);
            c.finish(rng, o)
        }),
        ("cross_entropy", |rng| {
            let mut c = Case::new();
            let logits = c.param(rng, "logits", &[2, 3, 5]);
            let targets = Tensor::from_fn(&[2, 3], |_| rng.random_range(0..5) as f64);
            let t = c.input("targets", targets);
            let o = c.g.cross_entropy(logits, t).unwrap();
            (c, o)
        }),
        ("gather", |rng| {
            let mut c = Case::new();
            let table = c.param(rng, "table", &[6, 3]);
            let ids = Tensor::from_fn(&[2, 4], |_| rng.random_range(0..6) as f64);
            let i = c.input("ids", ids);
            let o = c.g.gather(table, i).unwrap();
            c.finish(rng, o)
        }),
        ("reshape", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[2, 6]);
            let r = c.g.reshape(a, &[3, 4]).unwrap();
            let o = c.g.softmax(r);
            c.finish(rng, o)
        }),
        ("permute", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[2, 3, 4]);
            let p = c.g.permute(a, &[2, 0, 1]).unwrap();
            let o = c.g.softmax(p);
            c.finish(rng, o)
        }),
        ("repeat_heads", |rng| {
            let mut c = Case::new();
            let a = c.param(rng, "a", &[1, 2, 3, 2]);
            let o = c.g.repeat_heads(a, 3).unwrap();
            c.finish(rng, o)
        }),
    ]
}

/// Central-difference step for the full model. Its loss sums many terms,
/// so at the default step the cancellation error swamps entries near 1e-7.
pub const MODEL_STEP: f64 = 1e-4;

/// One-layer model with random gains and alternating norm flags.
pub fn one_layer_model() -> Result<(), String> {
    let mut cfg = ModelConfig::new(1, 8, 2, 1, 4, 7, 8);
    for seed in 0..SEEDS {
        cfg.use_sandwich_norm = seed % 2 == 1;
        cfg.use_embedding_norm = seed % 4 == 3;
        let mut p = ModelParams::build(&cfg).unwrap();
        apply_scheme(&mut p, &InitScheme::gamma(0.3, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for t in p.tensors.values_mut() {
            if t.ndim() == 1 {
                *t = Tensor::from_fn(t.shape(), |_| rng.random_range(0.5..1.5));
            }
        }
        let mg = ModelGraph::<f64>::new(&cfg, 2, 5, true).unwrap();
        let tokens: Vec<u32> = (0..10).map(|_| rng.random_range(0..7)).collect();
        let targets: Vec<u32> = (0..10).map(|_| rng.random_range(0..7)).collect();
        let inputs = mg.inputs(&tokens, Some(&targets)).unwrap();
        let loss = mg.loss.unwrap();
        let opts = GradCheckOptions { tol: 1e-4, step: MODEL_STEP };
        let report = grad_check(&mg.graph, &bindings(&p, &inputs), loss, opts).unwrap();
        if !report.passed() || report.leaves.len() != p.tensors.len() {
            return Err(format!("model seed {seed}: {:?} worst {:.3e}", report.failing(), report.worst()));
        }
    }
    Ok(())
}
