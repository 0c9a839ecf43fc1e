//! Transformer building blocks shared by the vision encoder, the Q-Former and
//! the language model, plus the linear projections into the LM width.

pub mod lm;
pub mod projection;
pub mod qformer;
pub mod vision;

use crome_autodiff::Var;

use crate::error::Result;
use crate::params::{Init, ParamSpec};
use crate::session::Session;

pub const LN_EPS: f64 = 1e-5;

pub(crate) fn layernorm_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gain"), &[d], Init::Ones),
        ParamSpec::new(format!("{prefix}.bias"), &[d], Init::Zeros),
    ]
}

/// Projections of a (possibly cross-) attention layer. Keys and values are
/// read from a `d_kv`-wide source.
pub(crate) fn attention_specs(prefix: &str, d: usize, d_kv: usize, std: f64) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.q_proj"), &[d, d], Init::Normal(std)),
        ParamSpec::new(format!("{prefix}.k_proj"), &[d_kv, d], Init::Normal(std)),
        ParamSpec::new(format!("{prefix}.v_proj"), &[d_kv, d], Init::Normal(std)),
        ParamSpec::new(format!("{prefix}.o_proj"), &[d, d], Init::Normal(std)),
    ]
}

pub(crate) fn mlp_specs(prefix: &str, d: usize, ratio: usize, std_in: f64, std_out: f64) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.up"), &[d, d * ratio], Init::Normal(std_in)),
        ParamSpec::new(format!("{prefix}.down"), &[d * ratio, d], Init::Normal(std_out)),
    ]
}

/// Pre-LN block: `x + attn(ln1(x))`, then `+ mlp(ln2(.))`.
pub(crate) fn block_specs(prefix: &str, d: usize, ratio: usize, std: f64, std_mlp_out: f64) -> Vec<ParamSpec> {
    let mut v = layernorm_specs(&format!("{prefix}.ln1"), d);
    v.extend(attention_specs(&format!("{prefix}.attn"), d, d, std));
    v.extend(layernorm_specs(&format!("{prefix}.ln2"), d));
    v.extend(mlp_specs(&format!("{prefix}.mlp"), d, ratio, std, std_mlp_out));
    v
}

pub fn layernorm(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let gain = s.param(&format!("{prefix}.gain"))?;
    let bias = s.param(&format!("{prefix}.bias"))?;
    Ok(s.graph.layernorm(x, gain, bias, LN_EPS)?)
}

/// Multi-head scaled dot-product attention from `x_q` onto `x_kv`.
pub fn attention(
    s: &mut Session,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    n_heads: usize,
    causal: bool,
) -> Result<Var> {
    let wq = s.param(&format!("{prefix}.q_proj"))?;
    let wk = s.param(&format!("{prefix}.k_proj"))?;
    let wv = s.param(&format!("{prefix}.v_proj"))?;
    let wo = s.param(&format!("{prefix}.o_proj"))?;
    let g = &mut s.graph;
    let q = g.matmul(x_q, wq)?;
    let k = g.matmul(x_kv, wk)?;
    let v = g.matmul(x_kv, wv)?;
    let d = g.value(q).cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, scale);
        if causal {
            scores = g.causal_mask(scores)?;
        }
        let p = g.softmax_rows(scores)?;
        heads.push(g.matmul(p, vh)?);
    }
    let merged = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok(g.matmul(merged, wo)?)
}

pub fn mlp(s: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let up = s.param(&format!("{prefix}.up"))?;
    let down = s.param(&format!("{prefix}.down"))?;
    let h = s.graph.matmul(x, up)?;
    let h = s.graph.gelu(h);
    Ok(s.graph.matmul(h, down)?)
}

pub fn transformer_block(s: &mut Session, prefix: &str, x: Var, n_heads: usize, causal: bool) -> Result<Var> {
    let h = layernorm(s, &format!("{prefix}.ln1"), x)?;
    let a = attention(s, &format!("{prefix}.attn"), h, h, n_heads, causal)?;
    let x = s.graph.add(x, a)?;
    let h = layernorm(s, &format!("{prefix}.ln2"), x)?;
    let m = mlp(s, &format!("{prefix}.mlp"), h)?;
    Ok(s.graph.add(x, m)?)
}
