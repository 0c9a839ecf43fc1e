//! Decoder-only toy language model over precomputed input embeddings.

use crome_autodiff::Var;

use crate::config::ToyLmConfig;
use crate::error::{CromeError, Result};
use crate::params::{Init, ParamSpec};
use crate::session::Session;

use super::{block_specs, layernorm, layernorm_specs, transformer_block};

pub fn lm_specs(cfg: &ToyLmConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let mut v = vec![
        ParamSpec::new("lm.tok_embed", &[cfg.vocab_size, d], Init::Normal(0.02)),
        ParamSpec::new("lm.pos_embed", &[cfg.max_seq_len, d], Init::Normal(0.01)),
    ];
    let std_out = 0.02 / ((2 * cfg.n_layers) as f64).sqrt();
    for i in 0..cfg.n_layers {
        v.extend(block_specs(&format!("lm.block{i}"), d, cfg.mlp_ratio, 0.02, std_out));
    }
    v.extend(layernorm_specs("lm.ln_f", d));
    // untied output head
    v.push(ParamSpec::new("lm.head", &[d, cfg.vocab_size], Init::Normal(0.02)));
    v
}

pub fn embed_tokens(s: &mut Session, ids: &[usize]) -> Result<Var> {
    let table = s.param("lm.tok_embed")?;
    Ok(s.graph.embedding(table, ids)?)
}

/// Causal decoder: `[T, d_llm]` embeddings to `[T, V]` next-token logits.
pub fn llm_forward(s: &mut Session, cfg: &ToyLmConfig, input_embeds: Var) -> Result<Var> {
    let t = s.graph.value(input_embeds).rows();
    if t > cfg.max_seq_len {
        return Err(CromeError::Contract(format!(
            "sequence length {t} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let pos_table = s.param("lm.pos_embed")?;
    let pos = s.graph.slice_rows(pos_table, 0, t)?;
    let mut x = s.graph.add(input_embeds, pos)?;
    for i in 0..cfg.n_layers {
        x = transformer_block(s, &format!("lm.block{i}"), x, cfg.n_heads, true)?;
    }
    let x = layernorm(s, "lm.ln_f", x)?;
    let head = s.param("lm.head")?;
    Ok(s.graph.matmul(x, head)?)
}
