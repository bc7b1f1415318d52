use voxc_grad::{Graph, ParamBinder, Var};

use super::{linear, norm, ContextConfig};
use crate::error::Result;

/// Transformer context network over `T x d_enc` frames, returning `T x d_model`.
///
/// Input projection, then (when enabled) a same-length grouped convolution
/// whose GELU output is added back as a relative positional signal before a
/// layer norm. Each block is pre-norm self-attention and a GELU feed-forward
/// with residuals; a final layer norm closes the stack.
pub fn contextualize(
    cfg: &ContextConfig,
    g: &mut Graph,
    b: &mut ParamBinder,
    z: Var,
) -> Result<Var> {
    let mut x = linear(g, b, "context.in_proj", z)?;

    if cfg.pos_conv_kernel > 0 {
        let k = cfg.pos_conv_kernel;
        let xt = g.transpose(x)?;
        let padded = g.pad_time(xt, k / 2, k - 1 - k / 2)?;
        let w = b.get(g, "context.pos_conv.weight")?;
        let bias = b.get(g, "context.pos_conv.bias")?;
        let conv = g.conv1d_grouped(padded, w, bias, 1, cfg.pos_conv_groups)?;
        let act = g.gelu(conv)?;
        let pos = g.transpose(act)?;
        let sum = g.add(x, pos)?;
        x = norm(g, b, "context.pos_norm", sum)?;
    }

    for l in 0..cfg.n_layers {
        let pre = format!("context.layer{l}");
        let h = norm(g, b, &format!("{pre}.attn_norm"), x)?;
        let a = attention(cfg, g, b, &pre, h)?;
        x = g.add(x, a)?;
        let h = norm(g, b, &format!("{pre}.ffn_norm"), x)?;
        let up = linear(g, b, &format!("{pre}.ffn.up"), h)?;
        let act = g.gelu(up)?;
        let down = linear(g, b, &format!("{pre}.ffn.down"), act)?;
        x = g.add(x, down)?;
    }
    norm(g, b, "context.final_norm", x)
}

fn attention(
    cfg: &ContextConfig,
    g: &mut Graph,
    b: &mut ParamBinder,
    pre: &str,
    h: Var,
) -> Result<Var> {
    let q = linear(g, b, &format!("{pre}.attn.q"), h)?;
    let k = linear(g, b, &format!("{pre}.attn.k"), h)?;
    let v = linear(g, b, &format!("{pre}.attn.v"), h)?;
    let dh = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for i in 0..cfg.n_heads {
        let qh = g.slice_cols(q, i * dh, dh)?;
        let kh = g.slice_cols(k, i * dh, dh)?;
        let vh = g.slice_cols(v, i * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax_rows(scores)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    linear(g, b, &format!("{pre}.attn.o"), cat)
}
