//! Transformer building blocks on top of [`Graph`].
//!
//! Blocks are pre-norm: `x + MHSA(LN(x))`, then `x + FF(LN(x))` with a
//! 4x-wide gelu feed-forward. The attention width is rounded up to a
//! multiple of the head count and projected back to the model width by the
//! output matrix, so widths like 149 with 6 heads work unchanged.

use rand::Rng;

use crate::error::AutodiffError;
use crate::graph::{AttentionLayout, Graph, Var};
use crate::params::{truncated_normal, ParamStore};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Attention width for `width` model dims split over `heads`.
pub fn attention_width(width: usize, heads: usize) -> usize {
    heads * width.div_ceil(heads)
}

pub fn init_weight<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: String,
    rows: usize,
    cols: usize,
) -> Result<(), AutodiffError> {
    store.insert(name, truncated_normal(rng, rows, cols, INIT_STD))?;
    Ok(())
}

pub fn init_bias(store: &mut ParamStore, name: String, cols: usize) -> Result<(), AutodiffError> {
    store.insert(name, Tensor::zeros(1, cols))?;
    Ok(())
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) -> Result<(), AutodiffError> {
    store.insert(format!("{prefix}.gain"), Tensor::filled(1, width, 1.0))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(1, width))?;
    Ok(())
}

/// Registers `{prefix}.W` (`inputs x outputs`) and `{prefix}.b`.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    inputs: usize,
    outputs: usize,
) -> Result<(), AutodiffError> {
    init_weight(store, rng, format!("{prefix}.W"), inputs, outputs)?;
    init_bias(store, format!("{prefix}.b"), outputs)
}

pub fn linear(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var, AutodiffError> {
    let w = g.param(&format!("{prefix}.W"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    g.linear(x, w, Some(b))
}

pub fn layer_norm(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var, AutodiffError> {
    let gain = g.param(&format!("{prefix}.gain"))?;
    let bias = g.param(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

pub fn init_attention<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    width: usize,
    heads: usize,
) -> Result<(), AutodiffError> {
    let inner = attention_width(width, heads);
    for m in ["q", "k", "v"] {
        init_weight(store, rng, format!("{prefix}.W{m}"), width, inner)?;
        init_bias(store, format!("{prefix}.b{m}"), inner)?;
    }
    init_weight(store, rng, format!("{prefix}.Wo"), inner, width)?;
    init_bias(store, format!("{prefix}.bo"), width)
}

/// Multi-head self-attention over blocks of `layout.seq_len` rows.
///
/// Output rows of invalid tokens are exactly zero.
pub fn multi_head_self_attention(
    g: &mut Graph<'_>,
    x: Var,
    prefix: &str,
    layout: &AttentionLayout,
) -> Result<Var, AutodiffError> {
    let proj = |g: &mut Graph<'_>, m: &str| -> Result<Var, AutodiffError> {
        let w = g.param(&format!("{prefix}.W{m}"))?;
        let b = g.param(&format!("{prefix}.b{m}"))?;
        g.linear(x, w, Some(b))
    };
    let q = proj(g, "q")?;
    let k = proj(g, "k")?;
    let v = proj(g, "v")?;
    let attn = g.attention(q, k, v, layout.clone())?;
    let wo = g.param(&format!("{prefix}.Wo"))?;
    let bo = g.param(&format!("{prefix}.bo"))?;
    let out = g.linear(attn, wo, Some(bo))?;
    g.mask_rows(out, &layout.valid)
}

pub fn init_transformer_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    width: usize,
    heads: usize,
) -> Result<(), AutodiffError> {
    init_layer_norm(store, &format!("{prefix}.ln1"), width)?;
    init_attention(store, rng, &format!("{prefix}.attn"), width, heads)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), width)?;
    init_linear(store, rng, &format!("{prefix}.ff1"), width, 4 * width)?;
    init_linear(store, rng, &format!("{prefix}.ff2"), 4 * width, width)
}

pub fn transformer_block(
    g: &mut Graph<'_>,
    x: Var,
    prefix: &str,
    layout: &AttentionLayout,
) -> Result<Var, AutodiffError> {
    let h = layer_norm(g, x, &format!("{prefix}.ln1"))?;
    let a = multi_head_self_attention(g, h, &format!("{prefix}.attn"), layout)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, x, &format!("{prefix}.ln2"))?;
    let h = linear(g, h, &format!("{prefix}.ff1"))?;
    let h = g.gelu(h);
    let h = linear(g, h, &format!("{prefix}.ff2"))?;
    g.add(x, h)
}
