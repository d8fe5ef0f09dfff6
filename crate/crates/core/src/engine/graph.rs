use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::{EngineError, Tensor};
use crate::scalar::Scalar;

/// Epsilon inside the root mean square of [`Graph::rms_norm`].
pub const RMS_EPS: f64 = 1e-6;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable; receives a gradient.
    Param,
    /// Data (token ids, targets); never differentiated.
    Input,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf(String, LeafKind),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Softmax(NodeId),
    RmsNorm(NodeId, T),
    Rope(NodeId, f64),
    Gather { table: NodeId, ids: NodeId },
    CrossEntropy { logits: NodeId, targets: NodeId },
    Silu(NodeId),
    Sigmoid(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    CausalMask(NodeId),
    RepeatHeads(NodeId, usize),
    Sum(NodeId),
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf(..) => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Softmax(..) => "softmax",
            Op::RmsNorm(..) => "rms_norm",
            Op::Rope(..) => "rope",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Silu(..) => "silu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::CausalMask(..) => "causal_mask",
            Op::RepeatHeads(..) => "repeat_heads",
            Op::Sum(..) => "sum",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf(..) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Gather { table, ids } => vec![table, ids],
            Op::CrossEntropy { logits, targets } => vec![logits, targets],
            Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::RmsNorm(a, _)
            | Op::Rope(a, _)
            | Op::Silu(a)
            | Op::Sigmoid(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::CausalMask(a)
            | Op::RepeatHeads(a, _)
            | Op::Sum(a) => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    label: Option<String>,
}

/// Source of leaf values for a forward pass.
pub trait Bindings<T: Scalar> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>>;
}

impl<T: Scalar> Bindings<T> for HashMap<String, Tensor<T>> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

impl<T: Scalar> Bindings<T> for BTreeMap<String, Tensor<T>> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

impl<T: Scalar, B: Bindings<T> + ?Sized> Bindings<T> for &B {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        (**self).lookup(name)
    }
}

/// Two binding sources searched in order.
impl<T: Scalar, A: Bindings<T>, B: Bindings<T>> Bindings<T> for (A, B) {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
}

/// Node values produced by [`Graph::forward`].
#[derive(Clone, Debug)]
pub struct Evaluation<T: Scalar = f64> {
    graph_id: u64,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Evaluation<T> {
    pub fn value(&self, node: NodeId) -> &Tensor<T> {
        &self.values[node.0]
    }

    /// Consumes the evaluation, returning the value of one node.
    pub fn take(mut self, node: NodeId) -> Tensor<T> {
        self.values.swap_remove(node.0)
    }

    /// Values of every labelled node and leaf, keyed by name.
    pub fn named(&self, graph: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        graph
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let name = match &n.op {
                    Op::Leaf(name, _) => Some(name.clone()),
                    _ => n.label.clone(),
                }?;
                Some((name, self.values[i].clone()))
            })
            .collect()
    }
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar = f64> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.map
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.map
    }
}

/// A static computation graph of tensor primitives.
///
/// Nodes are appended in topological order by the builder methods, which
/// infer and check shapes eagerly. Leaves are named; inner nodes may be
/// labelled with [`Graph::label`] for lookup after a forward pass.
#[derive(Clone, Debug)]
pub struct Graph<T: Scalar = f64> {
    id: u64,
    nodes: Vec<Node<T>>,
    leaves: HashMap<String, NodeId>,
    fault_mul_backward: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaves: HashMap::new(),
            fault_mul_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Looks up a leaf by name or an inner node by label.
    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        self.leaf(name).or_else(|| {
            self.nodes
                .iter()
                .position(|n| n.label.as_deref() == Some(name))
                .map(NodeId)
        })
    }

    /// Names of all parameter leaves, in insertion order.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Leaf(name, LeafKind::Param) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn label(&mut self, node: NodeId, name: &str) -> NodeId {
        self.nodes[node.0].label = Some(name.to_string());
        node
    }

    fn describe(&self, node: NodeId) -> String {
        let n = &self.nodes[node.0];
        match (&n.op, &n.label) {
            (Op::Leaf(name, _), _) => name.clone(),
            (op, Some(label)) => format!("{}({label})", op.kind()),
            (op, None) => format!("{}#{}", op.kind(), node.0),
        }
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            op,
            shape,
            label: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, kind: &str, detail: String) -> EngineError {
        EngineError::Shape {
            node: format!("{kind}#{}", self.nodes.len()),
            detail,
        }
    }

    fn add_leaf(&mut self, name: &str, shape: &[usize], kind: LeafKind) -> Result<NodeId, EngineError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(EngineError::BadExtent(shape.to_vec()));
        }
        if self.leaves.contains_key(name) {
            return Err(EngineError::DuplicateLeaf(name.to_string()));
        }
        let id = self.push(Op::Leaf(name.to_string(), kind), shape.to_vec());
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, EngineError> {
        self.add_leaf(name, shape, LeafKind::Param)
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, EngineError> {
        self.add_leaf(name, shape, LeafKind::Input)
    }

    /// Matrix product over the last two axes. `b` is either 2-D (shared
    /// across all leading axes of `a`) or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() >= 2
            && sb.len() >= 2
            && sa[sa.len() - 1] == sb[sb.len() - 2]
            && (sb.len() == 2 || (sb.len() == sa.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2]));
        if !ok {
            return Err(self.shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out = sa.clone();
        *out.last_mut().unwrap() = sb[sb.len() - 1];
        Ok(self.push(Op::MatMul(a, b), out))
    }

    fn broadcast_ok(sa: &[usize], sb: &[usize]) -> bool {
        sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if !Self::broadcast_ok(&sa, sb) {
            return Err(self.shape_err("add", format!("{sa:?} + {sb:?}")));
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    /// Elementwise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if !Self::broadcast_ok(&sa, sb) {
            return Err(self.shape_err("mul", format!("{sa:?} * {sb:?}")));
        }
        Ok(self.push(Op::Mul(a, b), sa))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), s)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Softmax(a), s)
    }

    /// `x / sqrt(mean(x²) + eps)` along the last axis, without a gain.
    pub fn rms_norm(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::RmsNorm(a, T::of(RMS_EPS)), s)
    }

    /// Rotary position embedding on `[..., seq, dim]`, rotating adjacent
    /// pairs `(2i, 2i+1)` by `pos · base^(-2i/dim)`.
    pub fn rope(&mut self, a: NodeId, base: f64) -> Result<NodeId, EngineError> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || s[s.len() - 1] % 2 != 0 {
            return Err(self.shape_err("rope", format!("{s:?} needs an even last axis")));
        }
        Ok(self.push(Op::Rope(a, base), s))
    }

    /// Row lookup: `table: [vocab, d]`, `ids: [...]` → `[..., d]`.
    pub fn gather(&mut self, table: NodeId, ids: NodeId) -> Result<NodeId, EngineError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(self.shape_err("gather", format!("table {st:?} must be 2-D")));
        }
        let mut out = self.shape(ids).to_vec();
        out.push(st[1]);
        Ok(self.push(Op::Gather { table, ids }, out))
    }

    /// Mean cross-entropy of `logits: [..., vocab]` against integer
    /// `targets: [...]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId, EngineError> {
        let (sl, st) = (self.shape(logits).to_vec(), self.shape(targets));
        if sl.len() < 2 || sl[..sl.len() - 1] != *st {
            return Err(self.shape_err("cross_entropy", format!("logits {sl:?} vs targets {st:?}")));
        }
        Ok(self.push(Op::CrossEntropy { logits, targets }, vec![1]))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Silu(a), s)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), s)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, EngineError> {
        let s = self.shape(a);
        if shape.is_empty() || shape.contains(&0) || s.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(self.shape_err("reshape", format!("{s:?} -> {shape:?}")));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// Axis permutation; output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId, EngineError> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        let valid = axes.len() == s.len()
            && axes.iter().all(|&ax| ax < s.len() && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(self.shape_err("permute", format!("{s:?} by {axes:?}")));
        }
        let out = axes.iter().map(|&ax| s[ax]).collect();
        Ok(self.push(Op::Permute(a, axes.to_vec()), out))
    }

    /// Sets entries above the diagonal of the trailing `[seq, seq]` block
    /// to `-inf`.
    pub fn causal_mask(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(self.shape_err("causal_mask", format!("{s:?} is not square in its last two axes")));
        }
        Ok(self.push(Op::CausalMask(a), s))
    }

    /// Repeats each index of axis 1 `reps` times consecutively
    /// (`[b, h, ...]` → `[b, h·reps, ...]`).
    pub fn repeat_heads(&mut self, a: NodeId, reps: usize) -> Result<NodeId, EngineError> {
        let mut s = self.shape(a).to_vec();
        if s.len() < 2 || reps == 0 {
            return Err(self.shape_err("repeat_heads", format!("{s:?} x{reps}")));
        }
        s[1] *= reps;
        Ok(self.push(Op::RepeatHeads(a, reps), s))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    /// Evaluates every node. Pure: identical bindings give bit-identical
    /// values.
    pub fn forward(&self, bindings: &impl Bindings<T>) -> Result<Evaluation<T>, EngineError> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = |id: NodeId| &values[id.0];
            let out = match &node.op {
                Op::Leaf(name, _) => {
                    let t = bindings
                        .lookup(name)
                        .ok_or_else(|| EngineError::UnboundLeaf(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(EngineError::BindingShape {
                            leaf: name.clone(),
                            expected: node.shape.clone(),
                            got: t.shape().to_vec(),
                        });
                    }
                    t.clone()
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (v(*a), v(*b));
                    let (batch, m, k, n, bb) = mm_dims(ta.shape(), tb.shape());
                    let mut out = vec![T::zero(); batch * m * n];
                    mm_nn(ta.data(), tb.data(), &mut out, batch, m, k, n, bb);
                    Tensor::from_parts(node.shape.clone(), out)
                }
                Op::Add(a, b) => zip_broadcast(v(*a), v(*b), |x, y| x + y),
                Op::Mul(a, b) => zip_broadcast(v(*a), v(*b), |x, y| x * y),
                Op::Scale(a, c) => v(*a).scale(*c),
                Op::Softmax(a) => softmax_rows(v(*a)),
                Op::RmsNorm(a, eps) => rms_norm_rows(v(*a), *eps),
                Op::Rope(a, base) => rope(v(*a), *base, false),
                Op::Gather { table, ids } => {
                    let (tt, ti) = (v(*table), v(*ids));
                    let idx = indices(ti, tt.shape()[0], || self.describe(NodeId(i)))?;
                    let d = tt.shape()[1];
                    let mut out = Vec::with_capacity(idx.len() * d);
                    for &r in &idx {
                        out.extend_from_slice(&tt.data()[r * d..(r + 1) * d]);
                    }
                    Tensor::from_parts(node.shape.clone(), out)
                }
                Op::CrossEntropy { logits, targets } => {
                    let (tl, tt) = (v(*logits), v(*targets));
                    let vocab = *tl.shape().last().unwrap();
                    let idx = indices(tt, vocab, || self.describe(NodeId(i)))?;
                    Tensor::scalar(mean_cross_entropy(tl.data(), vocab, &idx))
                }
                Op::Silu(a) => v(*a).map(|x| x * sigmoid(x)),
                Op::Sigmoid(a) => v(*a).map(sigmoid),
                Op::Reshape(a) => Tensor::from_parts(node.shape.clone(), v(*a).data().to_vec()),
                Op::Permute(a, axes) => permute(v(*a), axes),
                Op::CausalMask(a) => {
                    let mut t = v(*a).clone();
                    let s = node.shape[node.shape.len() - 1];
                    for (q, x) in t.data_mut().iter_mut().enumerate() {
                        if q % s > (q / s) % s {
                            *x = T::neg_infinity();
                        }
                    }
                    t
                }
                Op::RepeatHeads(a, reps) => repeat_heads(v(*a), *reps),
                Op::Sum(a) => Tensor::scalar(v(*a).sum()),
            };
            debug_assert_eq!(out.shape(), node.shape.as_slice());
            values.push(out);
        }
        Ok(Evaluation {
            graph_id: self.id,
            values,
        })
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// parameter leaf. Leaves with no path to the loss get exact zeros.
    pub fn backward(&self, eval: &Evaluation<T>, loss: NodeId) -> Result<Gradients<T>, EngineError> {
        if eval.graph_id != self.id || eval.values.len() != self.nodes.len() {
            return Err(EngineError::NotEvaluated);
        }
        if loss.0 >= self.nodes.len() {
            return Err(EngineError::UnknownNode(loss.0));
        }
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(EngineError::NonScalarLoss {
                node: self.describe(loss),
                shape: self.nodes[loss.0].shape.clone(),
            });
        }

        // Only nodes downstream of a parameter need gradients.
        let mut needs = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            needs[i] = match &n.op {
                Op::Leaf(_, kind) => *kind == LeafKind::Param,
                op => op.inputs().iter().any(|x| needs[x.0]),
            };
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(&self.nodes[loss.0].shape));
        let val = |id: NodeId| &eval.values[id.0];

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !needs[i] || matches!(node.op, Op::Leaf(..)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut send = |id: NodeId, t: Tensor<T>| {
                if needs[id.0] {
                    accumulate(&mut grads[id.0], t);
                }
            };
            match &node.op {
                Op::Leaf(..) => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (batch, m, k, n, bb) = mm_dims(ta.shape(), tb.shape());
                    if needs[a.0] {
                        let mut da = vec![T::zero(); batch * m * k];
                        mm_nt(g.data(), tb.data(), &mut da, batch, m, n, k, bb);
                        send(*a, Tensor::from_parts(ta.shape().to_vec(), da));
                    }
                    if needs[b.0] {
                        let mut db = vec![T::zero(); tb.numel()];
                        mm_tn(ta.data(), g.data(), &mut db, batch, m, k, n, bb);
                        send(*b, Tensor::from_parts(tb.shape().to_vec(), db));
                    }
                }
                Op::Add(a, b) => {
                    if needs[b.0] {
                        send(*b, reduce_broadcast(g.data(), val(*b).shape()));
                    }
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if needs[a.0] {
                        let mut da = zip_broadcast(&g, tb, |x, y| x * y);
                        if self.fault_mul_backward {
                            da = da.scale(T::of(1.1));
                        }
                        send(*a, da);
                    }
                    if needs[b.0] {
                        let prod: Vec<T> = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                        send(*b, reduce_broadcast(&prod, tb.shape()));
                    }
                }
                Op::Scale(a, c) => send(*a, g.scale(*c)),
                Op::Softmax(a) => {
                    let y = val(NodeId(i));
                    let n = *y.shape().last().unwrap();
                    let mut dx = g.clone();
                    for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let dot: T = drow.iter().zip(yrow).map(|(&d, &p)| d * p).sum();
                        for (d, &p) in drow.iter_mut().zip(yrow) {
                            *d = p * (*d - dot);
                        }
                    }
                    send(*a, dx);
                }
                Op::RmsNorm(a, eps) => {
                    let x = val(*a);
                    let y = val(NodeId(i));
                    let n = *x.shape().last().unwrap();
                    let nf = T::from_usize(n).unwrap();
                    let mut dx = g.clone();
                    for ((drow, xrow), yrow) in dx
                        .data_mut()
                        .chunks_mut(n)
                        .zip(x.data().chunks(n))
                        .zip(y.data().chunks(n))
                    {
                        let r = (xrow.iter().map(|&t| t * t).sum::<T>() / nf + *eps).sqrt();
                        let dot: T = drow.iter().zip(yrow).map(|(&d, &p)| d * p).sum::<T>() / nf;
                        for (d, &p) in drow.iter_mut().zip(yrow) {
                            *d = (*d - p * dot) / r;
                        }
                    }
                    send(*a, dx);
                }
                Op::Rope(a, base) => send(*a, rope(&g, *base, true)),
                Op::Gather { table, ids } => {
                    let tt = val(*table);
                    let d = tt.shape()[1];
                    let idx = indices(val(*ids), tt.shape()[0], || self.describe(NodeId(i)))?;
                    let mut dt = Tensor::zeros(tt.shape());
                    for (q, &r) in idx.iter().enumerate() {
                        let dst = &mut dt.data_mut()[r * d..(r + 1) * d];
                        for (x, &y) in dst.iter_mut().zip(&g.data()[q * d..(q + 1) * d]) {
                            *x += y;
                        }
                    }
                    send(*table, dt);
                }
                Op::CrossEntropy { logits, targets } => {
                    let tl = val(*logits);
                    let vocab = *tl.shape().last().unwrap();
                    let idx = indices(val(*targets), vocab, || self.describe(NodeId(i)))?;
                    let scale = g.data()[0] / T::from_usize(idx.len()).unwrap();
                    let mut dl = softmax_rows(tl);
                    for (row, &t) in dl.data_mut().chunks_mut(vocab).zip(&idx) {
                        row[t] -= T::one();
                        for x in row.iter_mut() {
                            *x *= scale;
                        }
                    }
                    send(*logits, dl);
                }
                Op::Silu(a) => {
                    let x = val(*a);
                    let dx = zip_broadcast(&g, x, |d, x| {
                        let s = sigmoid(x);
                        d * s * (T::one() + x * (T::one() - s))
                    });
                    send(*a, dx);
                }
                Op::Sigmoid(a) => {
                    let y = val(NodeId(i));
                    send(*a, zip_broadcast(&g, y, |d, s| d * s * (T::one() - s)));
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].shape.clone();
                    send(*a, Tensor::from_parts(shape, g.into_data()));
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (o, &ax) in axes.iter().enumerate() {
                        inv[ax] = o;
                    }
                    send(*a, permute(&g, &inv));
                }
                Op::CausalMask(a) => {
                    let mut dx = g;
                    let s = node.shape[node.shape.len() - 1];
                    for (q, x) in dx.data_mut().iter_mut().enumerate() {
                        if q % s > (q / s) % s {
                            *x = T::zero();
                        }
                    }
                    send(*a, dx);
                }
                Op::RepeatHeads(a, reps) => {
                    let src = &self.nodes[a.0].shape;
                    let (b, h) = (src[0], src[1]);
                    let inner: usize = src[2..].iter().product();
                    let mut dx = Tensor::zeros(src);
                    for bi in 0..b {
                        for oh in 0..h * reps {
                            let from = (bi * h * reps + oh) * inner;
                            let to = (bi * h + oh / reps) * inner;
                            for q in 0..inner {
                                dx.data_mut()[to + q] += g.data()[from + q];
                            }
                        }
                    }
                    send(*a, dx);
                }
                Op::Sum(a) => {
                    let shape = &self.nodes[a.0].shape;
                    send(*a, Tensor::full(shape, g.data()[0]));
                }
            }
        }

        let map = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Leaf(name, LeafKind::Param) => {
                    let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(&n.shape));
                    Some((name.clone(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { map })
    }

    /// Makes the multiply backward rule wrong on purpose so that gradient
    /// checking can be shown to catch it.
    #[cfg(test)]
    pub(crate) fn inject_mul_backward_fault(&mut self) {
        self.fault_mul_backward = true;
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (x, &y) in acc.data_mut().iter_mut().zip(t.data()) {
                *x += y;
            }
        }
        None => *slot = Some(t),
    }
}

/// (batch, m, k, n, b_batched) for `a: [..., m, k] · b: [..., k, n]`.
fn mm_dims(sa: &[usize], sb: &[usize]) -> (usize, usize, usize, usize, bool) {
    let batch = sa[..sa.len() - 2].iter().product();
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    (batch, m, k, sb[sb.len() - 1], sb.len() > 2)
}

fn zip_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let nb = b.numel();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(q, &x)| f(x, b.data()[q % nb]))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn reduce_broadcast<T: Scalar>(g: &[T], shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    let n = out.numel();
    for chunk in g.chunks(n) {
        for (x, &y) in out.data_mut().iter_mut().zip(chunk) {
            *x += y;
        }
    }
    out
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn rms_norm_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let n = *x.shape().last().unwrap();
    let nf = T::from_usize(n).unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let r = (row.iter().map(|&t| t * t).sum::<T>() / nf + eps).sqrt();
        for v in row.iter_mut() {
            *v /= r;
        }
    }
    out
}

/// Rotates adjacent pairs; `inverse` applies the transpose rotation.
fn rope<T: Scalar>(x: &Tensor<T>, base: f64, inverse: bool) -> Tensor<T> {
    let s = x.shape();
    let (seq, dim) = (s[s.len() - 2], s[s.len() - 1]);
    let half = dim / 2;
    let mut table = Vec::with_capacity(seq * half);
    for pos in 0..seq {
        for i in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / dim as f64);
            let (sin, cos) = theta.sin_cos();
            table.push((T::of(cos), T::of(if inverse { -sin } else { sin })));
        }
    }
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(dim).enumerate() {
        let pos = r % seq;
        for i in 0..half {
            let (cos, sin) = table[pos * half + i];
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * cos - x1 * sin;
            row[2 * i + 1] = x0 * sin + x1 * cos;
        }
    }
    out
}

fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let s = x.shape();
    let nd = s.len();
    let mut strides = vec![1; nd];
    for d in (0..nd - 1).rev() {
        strides[d] = strides[d + 1] * s[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..x.numel() {
        out.push(x.data()[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn repeat_heads<T: Scalar>(x: &Tensor<T>, reps: usize) -> Tensor<T> {
    let s = x.shape();
    let (b, h) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(x.numel() * reps);
    for bi in 0..b {
        for oh in 0..h * reps {
            let from = (bi * h + oh / reps) * inner;
            out.extend_from_slice(&x.data()[from..from + inner]);
        }
    }
    let mut shape = s.to_vec();
    shape[1] *= reps;
    Tensor::from_parts(shape, out)
}

fn indices<T: Scalar>(t: &Tensor<T>, bound: usize, node: impl Fn() -> String) -> Result<Vec<usize>, EngineError> {
    t.data()
        .iter()
        .map(|&x| {
            let f = x.f64();
            if f >= 0.0 && f.fract() == 0.0 && (f as usize) < bound {
                Ok(f as usize)
            } else {
                Err(EngineError::InvalidIndex { node: node(), value: f })
            }
        })
        .collect()
}

/// `-mean_r log softmax(row_r)[target_r]`.
pub(crate) fn mean_cross_entropy<T: Scalar>(logits: &[T], vocab: usize, targets: &[usize]) -> T {
    let mut total = T::zero();
    for (row, &t) in logits.chunks(vocab).zip(targets) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total += lse - row[t];
    }
    total / T::from_usize(targets.len()).unwrap()
}
