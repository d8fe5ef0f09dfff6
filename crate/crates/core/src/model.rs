//! Decoder-only Llama-style transformer built from engine primitives.
//!
//! Layout per layer: RMS pre-norm, causal grouped-query attention with
//! rotary embeddings on Q and K, residual add, RMS pre-norm, SwiGLU MLP,
//! residual add. Two optional stability switches: an RMS norm on the token
//! embeddings before layer 0, and sandwich norms (an extra RMS norm on each
//! sublayer's output before it joins the residual stream).
//!
//! All weight matrices are stored `d_in × d_out` and applied as `x · W`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{self, Bindings, EngineError, Gradients, Graph, NodeId, Tensor};
use crate::scalar::Scalar;

pub const TOKEN_EMBEDDING: &str = "tok_embedding";
pub const LM_HEAD: &str = "lm_head";
pub const FINAL_NORM: &str = "final_norm";
pub const EMBED_NORM: &str = "embed_norm";

pub const INPUT_TOKENS: &str = "tokens";
pub const INPUT_TARGETS: &str = "targets";

/// Per-layer parameter name, e.g. `layer_param(0, "wq") == "layers.0.wq"`.
pub fn layer_param(layer: usize, leaf: &str) -> String {
    format!("layers.{layer}.{leaf}")
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty context")]
    EmptyContext,
    #[error("k = {k} must be in 1..={vocab}")]
    InvalidK { k: usize, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub use_embedding_norm: bool,
    #[serde(default)]
    pub use_sandwich_norm: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// RMS norm before the output projection (standard; off only for
    /// scale experiments on embedding-only models).
    #[serde(default = "yes")]
    pub final_norm: bool,
}

impl ModelConfig {
    /// Config with the default options (no stability norms, RoPE base 10⁴).
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        n_kv_heads: usize,
        head_dim: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            n_kv_heads,
            head_dim,
            vocab_size,
            max_seq_len,
            use_embedding_norm: false,
            use_sandwich_norm: false,
            rope_base: default_rope_base(),
            final_norm: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return fail("d_model, n_heads, n_kv_heads and head_dim must be positive".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return fail(format!(
                "n_heads × head_dim = {} but d_model = {}",
                self.n_heads * self.head_dim,
                self.d_model
            ));
        }
        if self.head_dim % 2 != 0 {
            return fail(format!("head_dim ({}) must be even for rotary embeddings", self.head_dim));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return fail(format!("rope_base must be finite and > 1, got {}", self.rope_base));
        }
        Ok(())
    }

    /// SwiGLU hidden width: ⌊8·d_model/3⌋ rounded up to a multiple of 8.
    pub fn mlp_hidden(&self) -> usize {
        let raw = 8 * self.d_model / 3;
        raw.div_ceil(8).max(1) * 8
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Every trainable tensor with its shape.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, h, v) = (self.d_model, self.mlp_hidden(), self.vocab_size);
        let mut m = BTreeMap::new();
        m.insert(TOKEN_EMBEDDING.to_string(), vec![v, d]);
        m.insert(LM_HEAD.to_string(), vec![d, v]);
        if self.final_norm {
            m.insert(FINAL_NORM.to_string(), vec![d]);
        }
        if self.use_embedding_norm {
            m.insert(EMBED_NORM.to_string(), vec![d]);
        }
        for l in 0..self.n_layers {
            m.insert(layer_param(l, "wq"), vec![d, self.n_heads * self.head_dim]);
            m.insert(layer_param(l, "wk"), vec![d, self.kv_dim()]);
            m.insert(layer_param(l, "wv"), vec![d, self.kv_dim()]);
            m.insert(layer_param(l, "wo"), vec![self.n_heads * self.head_dim, d]);
            m.insert(layer_param(l, "w_gate"), vec![d, h]);
            m.insert(layer_param(l, "w_up"), vec![d, h]);
            m.insert(layer_param(l, "w_down"), vec![h, d]);
            m.insert(layer_param(l, "attn_norm"), vec![d]);
            m.insert(layer_param(l, "mlp_norm"), vec![d]);
            if self.use_sandwich_norm {
                m.insert(layer_param(l, "attn_post_norm"), vec![d]);
                m.insert(layer_param(l, "mlp_post_norm"), vec![d]);
            }
        }
        m
    }
}

/// Named trainable tensors of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f64> {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Zero-filled matrices and unit norm gains; initialization is applied
    /// separately.
    pub fn build(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 1 {
                    Tensor::ones(&shape)
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    /// Names of the 2-D weight matrices.
    pub fn matrix_names(&self) -> impl Iterator<Item = &str> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.ndim() == 2)
            .map(|(n, _)| n.as_str())
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks every tensor against the config's declared shapes.
    pub fn check_shapes(&self) -> Result<(), ModelError> {
        let expected = self.config.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(ModelError::Shape(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Shape(format!(
                        "{name}: expected {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Shape(format!("missing tensor {name}"))),
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// The model's computation graph for one fixed `(batch, seq)` shape.
#[derive(Clone, Debug)]
pub struct ModelGraph<T: Scalar = f64> {
    pub graph: Graph<T>,
    pub logits: NodeId,
    pub loss: Option<NodeId>,
    pub batch: usize,
    pub seq: usize,
    vocab: usize,
}

struct Builder<'a, T: Scalar> {
    g: Graph<T>,
    cfg: &'a ModelConfig,
}

impl<T: Scalar> Builder<'_, T> {
    fn p(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId, EngineError> {
        self.g.param(name, &shape)
    }

    fn norm(&mut self, x: NodeId, gain: &str) -> Result<NodeId, EngineError> {
        let g = self.p(gain, vec![self.cfg.d_model])?;
        let n = self.g.rms_norm(x);
        self.g.mul(n, g)
    }

    /// `[B, S, heads·hd]` → `[B, heads, S, hd]`.
    fn split_heads(&mut self, x: NodeId, b: usize, s: usize, heads: usize) -> Result<NodeId, EngineError> {
        let r = self.g.reshape(x, &[b, s, heads, self.cfg.head_dim])?;
        self.g.permute(r, &[0, 2, 1, 3])
    }

    fn attention(&mut self, l: usize, x: NodeId, b: usize, s: usize) -> Result<NodeId, EngineError> {
        let cfg = self.cfg;
        let (d, qd, kvd) = (cfg.d_model, cfg.n_heads * cfg.head_dim, cfg.kv_dim());
        let wq = self.p(&layer_param(l, "wq"), vec![d, qd])?;
        let wk = self.p(&layer_param(l, "wk"), vec![d, kvd])?;
        let wv = self.p(&layer_param(l, "wv"), vec![d, kvd])?;
        let wo = self.p(&layer_param(l, "wo"), vec![qd, d])?;

        let q = self.g.matmul(x, wq)?;
        let q = self.split_heads(q, b, s, cfg.n_heads)?;
        let q = self.g.rope(q, cfg.rope_base)?;
        let k = self.g.matmul(x, wk)?;
        let k = self.split_heads(k, b, s, cfg.n_kv_heads)?;
        let k = self.g.rope(k, cfg.rope_base)?;
        let v = self.g.matmul(x, wv)?;
        let v = self.split_heads(v, b, s, cfg.n_kv_heads)?;
        let reps = cfg.n_heads / cfg.n_kv_heads;
        let (k, v) = if reps > 1 {
            (self.g.repeat_heads(k, reps)?, self.g.repeat_heads(v, reps)?)
        } else {
            (k, v)
        };

        let kt = self.g.permute(k, &[0, 1, 3, 2])?;
        let scores = self.g.matmul(q, kt)?;
        let scores = self.g.scale(scores, T::of(1.0 / (cfg.head_dim as f64).sqrt()));
        let scores = self.g.causal_mask(scores)?;
        let probs = self.g.softmax(scores);
        self.g.label(probs, &format!("layers.{l}.attn_probs"));
        let o = self.g.matmul(probs, v)?;
        let o = self.g.permute(o, &[0, 2, 1, 3])?;
        let o = self.g.reshape(o, &[b, s, qd])?;
        self.g.matmul(o, wo)
    }

    fn mlp(&mut self, l: usize, x: NodeId) -> Result<NodeId, EngineError> {
        let (d, h) = (self.cfg.d_model, self.cfg.mlp_hidden());
        let wg = self.p(&layer_param(l, "w_gate"), vec![d, h])?;
        let wu = self.p(&layer_param(l, "w_up"), vec![d, h])?;
        let wd = self.p(&layer_param(l, "w_down"), vec![h, d])?;
        let gate = self.g.matmul(x, wg)?;
        let gate = self.g.silu(gate);
        let up = self.g.matmul(x, wu)?;
        let hidden = self.g.mul(gate, up)?;
        self.g.matmul(hidden, wd)
    }
}

impl<T: Scalar> ModelGraph<T> {
    pub fn new(config: &ModelConfig, batch: usize, seq: usize, with_loss: bool) -> Result<Self, ModelError> {
        config.validate()?;
        if batch == 0 || seq == 0 {
            return Err(ModelError::Shape(format!("batch {batch} × seq {seq} must be positive")));
        }
        if seq > config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: seq,
                max: config.max_seq_len,
            });
        }
        let cfg = config;
        let mut bld = Builder { g: Graph::new(), cfg };
        let d = cfg.d_model;

        let emb = bld.p(TOKEN_EMBEDDING, vec![cfg.vocab_size, d])?;
        let tokens = bld.g.input(INPUT_TOKENS, &[batch, seq])?;
        let mut x = bld.g.gather(emb, tokens)?;
        if cfg.use_embedding_norm {
            x = bld.norm(x, EMBED_NORM)?;
        }
        for l in 0..cfg.n_layers {
            let h = bld.norm(x, &layer_param(l, "attn_norm"))?;
            let mut a = bld.attention(l, h, batch, seq)?;
            if cfg.use_sandwich_norm {
                a = bld.norm(a, &layer_param(l, "attn_post_norm"))?;
            }
            x = bld.g.add(x, a)?;

            let h = bld.norm(x, &layer_param(l, "mlp_norm"))?;
            let mut m = bld.mlp(l, h)?;
            if cfg.use_sandwich_norm {
                m = bld.norm(m, &layer_param(l, "mlp_post_norm"))?;
            }
            x = bld.g.add(x, m)?;
        }
        if cfg.final_norm {
            x = bld.norm(x, FINAL_NORM)?;
        }
        let head = bld.p(LM_HEAD, vec![d, cfg.vocab_size])?;
        let logits = bld.g.matmul(x, head)?;
        bld.g.label(logits, "logits");

        let loss = if with_loss {
            let targets = bld.g.input(INPUT_TARGETS, &[batch, seq])?;
            let l = bld.g.cross_entropy(logits, targets)?;
            Some(bld.g.label(l, "loss"))
        } else {
            None
        };
        Ok(Self {
            graph: bld.g,
            logits,
            loss,
            batch,
            seq,
            vocab: cfg.vocab_size,
        })
    }

    fn id_tensor(&self, ids: &[u32]) -> Result<Tensor<T>, ModelError> {
        if ids.len() != self.batch * self.seq {
            return Err(ModelError::Shape(format!(
                "expected {}×{} token ids, got {}",
                self.batch,
                self.seq,
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(ModelError::TokenOutOfRange {
                token: bad,
                vocab: self.vocab,
            });
        }
        Ok(Tensor::new(
            vec![self.batch, self.seq],
            ids.iter().map(|&t| T::of(t as f64)).collect(),
        )?)
    }

    /// Input bindings for flat row-major `batch × seq` token ids.
    pub fn inputs(&self, tokens: &[u32], targets: Option<&[u32]>) -> Result<BTreeMap<String, Tensor<T>>, ModelError> {
        let mut m = BTreeMap::new();
        m.insert(INPUT_TOKENS.to_string(), self.id_tensor(tokens)?);
        if let Some(t) = targets {
            m.insert(INPUT_TARGETS.to_string(), self.id_tensor(t)?);
        }
        Ok(m)
    }

    pub fn logits(&self, params: &ModelParams<T>, tokens: &[u32]) -> Result<Tensor<T>, ModelError> {
        let inputs = self.inputs(tokens, None)?;
        let eval = self.graph.forward(&(&params.tensors, &inputs))?;
        Ok(eval.take(self.logits))
    }

    /// Mean next-token loss and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        params: &ModelParams<T>,
        tokens: &[u32],
        targets: &[u32],
    ) -> Result<(T, Gradients<T>), ModelError> {
        let loss = self.loss.ok_or_else(|| ModelError::Shape("graph was built without a loss".into()))?;
        let inputs = self.inputs(tokens, Some(targets))?;
        let eval = self.graph.forward(&(&params.tensors, &inputs))?;
        let value = eval.value(loss).data()[0];
        let grads = self.graph.backward(&eval, loss)?;
        Ok((value, grads))
    }

    /// Mean next-token loss only.
    pub fn loss(&self, params: &ModelParams<T>, tokens: &[u32], targets: &[u32]) -> Result<T, ModelError> {
        let loss = self.loss.ok_or_else(|| ModelError::Shape("graph was built without a loss".into()))?;
        let inputs = self.inputs(tokens, Some(targets))?;
        let eval = self.graph.forward(&(&params.tensors, &inputs))?;
        Ok(eval.value(loss).data()[0])
    }
}

fn flatten_rows(rows: &[Vec<u32>]) -> Result<(usize, usize, Vec<u32>), ModelError> {
    let seq = rows.first().map_or(0, Vec::len);
    if seq == 0 {
        return Err(ModelError::EmptyContext);
    }
    if rows.iter().any(|r| r.len() != seq) {
        return Err(ModelError::Shape("token rows have unequal lengths".into()));
    }
    Ok((rows.len(), seq, rows.concat()))
}

/// Logits `[batch, seq, vocab]` for a batch of equal-length token rows.
pub fn forward_logits<T: Scalar>(params: &ModelParams<T>, tokens: &[Vec<u32>]) -> Result<Tensor<T>, ModelError> {
    let (b, s, flat) = flatten_rows(tokens)?;
    ModelGraph::new(&params.config, b, s, false)?.logits(params, &flat)
}

/// `-mean log softmax(logits)[target]` over every position.
pub fn next_token_loss<T: Scalar>(logits: &Tensor<T>, targets: &[Vec<u32>]) -> Result<T, ModelError> {
    let (b, s, flat) = flatten_rows(targets)?;
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] != b || shape[1] != s {
        return Err(ModelError::Shape(format!("logits {shape:?} vs targets {b}×{s}")));
    }
    let vocab = shape[2];
    let idx = flat
        .iter()
        .map(|&t| {
            if (t as usize) < vocab {
                Ok(t as usize)
            } else {
                Err(ModelError::TokenOutOfRange { token: t, vocab })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(engine::mean_cross_entropy(logits.data(), vocab, &idx))
}

/// Top-`k` next tokens after `context` with their probabilities, sorted by
/// descending probability, ties by ascending token id.
pub fn predict_topk<T: Scalar>(params: &ModelParams<T>, context: &[u32], k: usize) -> Result<Vec<(u32, f64)>, ModelError> {
    if context.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    let vocab = params.config.vocab_size;
    if k == 0 || k > vocab {
        return Err(ModelError::InvalidK { k, vocab });
    }
    let logits = forward_logits(params, &[context.to_vec()])?;
    let last = &logits.data()[(context.len() - 1) * vocab..];
    let probs = engine::softmax_rows(&Tensor::new(vec![vocab], last.to_vec())?);
    let mut ranked: Vec<(u32, f64)> = probs
        .data()
        .iter()
        .enumerate()
        .map(|(i, p)| (i as u32, p.f64()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Binds parameters and inputs together for graph-level tools such as
/// [`engine::grad_check`].
pub fn bindings<'a, T: Scalar>(
    params: &'a ModelParams<T>,
    inputs: &'a BTreeMap<String, Tensor<T>>,
) -> impl Bindings<T> + 'a {
    (&params.tensors, inputs)
}
