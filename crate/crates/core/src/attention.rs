//! Cross-attention summarizers: a Q-Former-style stack and a
//! Perceiver-Resampler-style stack, both reducing a variable-length feature
//! sequence to a fixed bank of query tokens.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{ParamStore, Tensor};

/// Additive mask value for excluded attention positions. Finite on purpose:
/// exp(x - max) underflows to exactly zero, so masked rows stay NaN-free.
const MASK_OFF: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Pure cross-attention stack; queries attend to features only.
    QFormer,
    /// Flamingo-style resampler; keys/values are `[features; current tokens]`.
    Perceiver,
}

/// Shape of one summarizer stack. `query_count` is the number of learnable
/// query tokens, the m / n / k of the owning encoder.
#[derive(Debug, Clone, Copy)]
pub struct StackConfig {
    pub kind: BlockKind,
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub ff_mult: usize,
    pub query_count: usize,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.depth == 0 || self.query_count == 0 {
            return Err(Error::Config("attention stack dimensions must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by head count {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Allocates one attention layer's parameters under `layer_prefix`.
pub fn init_layer(
    store: &mut ParamStore,
    layer_prefix: &str,
    kind: BlockKind,
    width: usize,
    ff_mult: usize,
    init_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d = width;
    let dff = d * ff_mult;
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{layer_prefix}.{w}"), Tensor::trunc_normal(vec![d, d], init_std, rng))?;
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.insert(&format!("{layer_prefix}.{b}"), Tensor::zeros(vec![d]))?;
    }
    let norms: &[&str] = match kind {
        BlockKind::QFormer => &["ln1"],
        BlockKind::Perceiver => &["lnq", "lnkv", "ln2"],
    };
    for ln in norms {
        store.insert(&format!("{layer_prefix}.{ln}.gain"), Tensor::new(vec![d], vec![1.0; d])?)?;
        store.insert(&format!("{layer_prefix}.{ln}.bias"), Tensor::zeros(vec![d]))?;
    }
    store.insert(&format!("{layer_prefix}.ff.w1"), Tensor::trunc_normal(vec![d, dff], init_std, rng))?;
    store.insert(&format!("{layer_prefix}.ff.b1"), Tensor::zeros(vec![dff]))?;
    store.insert(&format!("{layer_prefix}.ff.w2"), Tensor::trunc_normal(vec![dff, d], init_std, rng))?;
    store.insert(&format!("{layer_prefix}.ff.b2"), Tensor::zeros(vec![d]))?;
    Ok(())
}

/// Allocates the query-token bank and per-layer parameters under `prefix`.
pub fn init_stack(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &StackConfig,
    init_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    store.insert(
        &format!("{prefix}.queries"),
        Tensor::trunc_normal(vec![cfg.query_count, cfg.width], init_std, rng),
    )?;
    for layer in 0..cfg.depth {
        init_layer(store, &format!("{prefix}.layer{layer}"), cfg.kind, cfg.width, cfg.ff_mult, init_std, rng)?;
    }
    Ok(())
}

fn linear(g: &mut Graph, x: NodeId, store: &ParamStore, w: &str, b: &str) -> Result<NodeId> {
    let wn = g.param(store, w)?;
    let bn = g.param(store, b)?;
    let h = g.matmul(x, wn)?;
    g.add_bias(h, bn)
}

fn norm(g: &mut Graph, x: NodeId, store: &ParamStore, prefix: &str) -> Result<NodeId> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, 1e-5)
}

/// Scaled dot-product cross-attention with per-head projections, returning
/// the output and one `[q x c]` attention-weight node per head.
///
/// Parameters are read from `store` under `layer_prefix` (`wq`, `bq`, ...).
/// `context_mask`, when given, marks which context rows may be attended to.
pub fn multi_head_cross_attention_with_weights(
    g: &mut Graph,
    store: &ParamStore,
    layer_prefix: &str,
    queries: NodeId,
    context: NodeId,
    heads: usize,
    context_mask: Option<&[bool]>,
) -> Result<(NodeId, Vec<NodeId>)> {
    let qd = *g.shape(queries).last().unwrap_or(&0);
    let cd = *g.shape(context).last().unwrap_or(&0);
    if qd != cd {
        return Err(Error::Dim(format!(
            "query width {qd} does not match context width {cd}"
        )));
    }
    if qd % heads != 0 {
        return Err(Error::Dim(format!("width {qd} not divisible by {heads} heads")));
    }
    let c_rows = g.shape(context)[0];
    if c_rows == 0 {
        return Err(Error::Contract("attention over empty context".into()));
    }
    if let Some(mask) = context_mask {
        if mask.len() != c_rows {
            return Err(Error::Dim(format!(
                "context mask length {} does not match {c_rows} rows",
                mask.len()
            )));
        }
        if mask.iter().all(|m| !m) {
            return Err(Error::Contract("attention with fully masked context".into()));
        }
    }

    let dh = qd / heads;
    let q = linear(g, queries, store, &format!("{layer_prefix}.wq"), &format!("{layer_prefix}.bq"))?;
    let k = linear(g, context, store, &format!("{layer_prefix}.wk"), &format!("{layer_prefix}.bk"))?;
    let v = linear(g, context, store, &format!("{layer_prefix}.wv"), &format!("{layer_prefix}.bv"))?;

    let mask_node = match context_mask {
        Some(mask) => {
            let vals: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { MASK_OFF }).collect();
            Some(g.input(vec![c_rows], vals)?)
        }
        None => None,
    };

    let mut head_outs = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow_cols(q, h * dh, dh)?;
        let kh = g.narrow_cols(k, h * dh, dh)?;
        let vh = g.narrow_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = match mask_node {
            Some(m) => g.add_bias(scores, m)?,
            None => scores,
        };
        let weights = g.softmax_last(scores)?;
        head_outs.push(g.matmul(weights, vh)?);
        head_weights.push(weights);
    }
    let merged = g.concat_cols(&head_outs)?;
    let out = linear(g, merged, store, &format!("{layer_prefix}.wo"), &format!("{layer_prefix}.bo"))?;
    Ok((out, head_weights))
}

pub fn multi_head_cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    layer_prefix: &str,
    queries: NodeId,
    context: NodeId,
    heads: usize,
    context_mask: Option<&[bool]>,
) -> Result<NodeId> {
    multi_head_cross_attention_with_weights(g, store, layer_prefix, queries, context, heads, context_mask)
        .map(|(out, _)| out)
}

fn feed_forward(g: &mut Graph, store: &ParamStore, layer_prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = linear(g, x, store, &format!("{layer_prefix}.ff.w1"), &format!("{layer_prefix}.ff.b1"))?;
    let h = g.gelu(h)?;
    linear(g, h, store, &format!("{layer_prefix}.ff.w2"), &format!("{layer_prefix}.ff.b2"))
}

/// One self-attention block over a feature sequence (queries = context),
/// with the QFormer layer layout. Used by the toy encoder backbones.
pub fn self_attention_block(
    g: &mut Graph,
    store: &ParamStore,
    layer_prefix: &str,
    x: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let attn = multi_head_cross_attention(g, store, layer_prefix, x, x, heads, None)?;
    let res = g.add(x, attn)?;
    let normed = norm(g, res, store, &format!("{layer_prefix}.ln1"))?;
    let ff = feed_forward(g, store, layer_prefix, normed)?;
    g.add(normed, ff)
}

/// Q-Former-style summarization: the query bank attends to `features`
/// through `depth` blocks of cross-attention + residual, layer norm, then
/// feed-forward + residual. Output row count always equals the bank size.
pub fn qformer_summarize(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    features: NodeId,
    cfg: &StackConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if g.shape(features)[0] == 0 {
        return Err(Error::Contract("qformer_summarize over empty features".into()));
    }
    let mut tokens = g.param(store, &format!("{prefix}.queries"))?;
    for layer in 0..cfg.depth {
        let lp = format!("{prefix}.layer{layer}");
        let attn = multi_head_cross_attention(g, store, &lp, tokens, features, cfg.heads, None)?;
        let res = g.add(tokens, attn)?;
        let normed = norm(g, res, store, &format!("{lp}.ln1"))?;
        let ff = feed_forward(g, store, &lp, normed)?;
        tokens = g.add(normed, ff)?;
    }
    Ok(tokens)
}

/// Perceiver-Resampler-style summarization. Keys and values are the
/// concatenation of the features and the current query tokens; pre-norm
/// residual blocks. `feature_mask` marks attendable feature rows (query-token
/// rows are always attendable).
pub fn perceiver_resample(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    features: NodeId,
    cfg: &StackConfig,
    feature_mask: Option<&[bool]>,
) -> Result<NodeId> {
    cfg.validate()?;
    if g.shape(features)[0] == 0 {
        return Err(Error::Contract("perceiver_resample over empty features".into()));
    }
    let full_mask: Option<Vec<bool>> = feature_mask.map(|m| {
        let mut v = m.to_vec();
        v.extend(std::iter::repeat(true).take(cfg.query_count));
        v
    });
    let mut tokens = g.param(store, &format!("{prefix}.queries"))?;
    for layer in 0..cfg.depth {
        let lp = format!("{prefix}.layer{layer}");
        let q_in = norm(g, tokens, store, &format!("{lp}.lnq"))?;
        let kv = g.concat_rows(&[features, tokens])?;
        let kv = norm(g, kv, store, &format!("{lp}.lnkv"))?;
        let attn =
            multi_head_cross_attention(g, store, &lp, q_in, kv, cfg.heads, full_mask.as_deref())?;
        tokens = g.add(tokens, attn)?;
        let ff_in = norm(g, tokens, store, &format!("{lp}.ln2"))?;
        let ff = feed_forward(g, store, &lp, ff_in)?;
        tokens = g.add(tokens, ff)?;
    }
    Ok(tokens)
}
