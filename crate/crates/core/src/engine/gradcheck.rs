use std::collections::BTreeMap;

use super::{Bindings, EngineError, Graph, NodeId, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Pass threshold on the per-leaf maximum relative error.
    pub tol: f64,
    /// Central-difference step.
    pub step: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            step: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub name: String,
    /// `max_i |analytic_i - numeric_i| / max(|numeric_i|, 1e-8)`.
    pub max_rel_error: f64,
    /// Flat index where the maximum was attained.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_error < self.tol)
    }

    /// Names of the leaves at or above tolerance.
    pub fn failing(&self) -> Vec<&str> {
        self.leaves
            .iter()
            .filter(|l| l.max_rel_error >= self.tol)
            .map(|l| l.name.as_str())
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `loss` against central differences
/// for every entry of every parameter leaf.
pub fn grad_check<T: Scalar>(
    graph: &Graph<T>,
    bindings: &impl Bindings<T>,
    loss: NodeId,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, EngineError> {
    let eval = graph.forward(bindings)?;
    let grads = graph.backward(&eval, loss)?;

    let mut owned: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for name in graph.param_names() {
        let t = bindings
            .lookup(name)
            .ok_or_else(|| EngineError::UnboundLeaf(name.to_string()))?;
        owned.insert(name.to_string(), t.clone());
    }
    let h = T::of(opts.step);
    let two_h = opts.step * 2.0;

    let mut leaves = Vec::new();
    for name in graph.param_names() {
        let analytic = grads.get(name).expect("every param leaf has a gradient");
        let mut worst = (0.0f64, 0usize);
        for idx in 0..analytic.numel() {
            let orig = owned[name].data()[idx];
            let mut probe = |x: T| -> Result<f64, EngineError> {
                owned.get_mut(name).unwrap().data_mut()[idx] = x;
                let ev = graph.forward(&(&owned, bindings))?;
                Ok(ev.value(loss).data()[0].f64())
            };
            let plus = probe(orig + h)?;
            let minus = probe(orig - h)?;
            owned.get_mut(name).unwrap().data_mut()[idx] = orig;

            let numeric = (plus - minus) / two_h;
            let err = (analytic.data()[idx].f64() - numeric).abs() / numeric.abs().max(1e-8);
            if err > worst.0 || err.is_nan() {
                worst = (err, idx);
            }
        }
        leaves.push(LeafReport {
            name: name.to_string(),
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport {
        leaves,
        tol: opts.tol,
    })
}
