//! Q-Former-lite: learnable queries that self-attend jointly with the
//! instruction tokens in every block and cross-attend to image features in
//! every `cross_attn_every`-th block.

use crome_autodiff::Var;

use crate::config::QFormerConfig;
use crate::error::{CromeError, Result};
use crate::params::{Init, ParamSpec};
use crate::session::Session;

use super::{attention, attention_specs, layernorm, layernorm_specs, mlp, mlp_specs};

const STD: f64 = 0.02;

pub fn qformer_specs(cfg: &QFormerConfig, vocab: usize, d_image: usize) -> Vec<ParamSpec> {
    let d = cfg.hidden_dim;
    let mut v = vec![
        ParamSpec::new("qformer.queries", &[cfg.n_queries, d], Init::Normal(STD)),
        ParamSpec::new("qformer.tok_embed", &[vocab, d], Init::Normal(STD)),
        ParamSpec::new("qformer.pos_embed", &[cfg.max_instruction_len, d], Init::Normal(STD)),
    ];
    for i in 0..cfg.n_layers {
        let p = format!("qformer.block{i}");
        v.extend(layernorm_specs(&format!("{p}.ln1"), d));
        v.extend(attention_specs(&format!("{p}.self"), d, d, STD));
        if cfg.has_cross_attention(i) {
            v.extend(layernorm_specs(&format!("{p}.ln_cross"), d));
            v.extend(attention_specs(&format!("{p}.cross"), d, d_image, STD));
        }
        v.extend(layernorm_specs(&format!("{p}.ln2"), d));
        v.extend(mlp_specs(&format!("{p}.mlp"), d, cfg.mlp_ratio, STD, STD));
    }
    v.extend(layernorm_specs("qformer.ln_f", d));
    v
}

/// Returns the final states of the query positions, `[n_queries, d_q]`.
/// An empty instruction is allowed (caption-style prompts).
pub fn qformer_forward(s: &mut Session, cfg: &QFormerConfig, instruction: &[usize], img_feats: Var) -> Result<Var> {
    if s.graph.value(img_feats).rows() == 0 {
        return Err(CromeError::Contract("qformer needs at least one image feature".into()));
    }
    if instruction.len() > cfg.max_instruction_len {
        return Err(CromeError::Contract(format!(
            "instruction of {} tokens exceeds qformer limit {}",
            instruction.len(),
            cfg.max_instruction_len
        )));
    }
    let nq = cfg.n_queries;
    let queries = s.param("qformer.queries")?;
    let table = s.param("qformer.tok_embed")?;
    let pos_table = s.param("qformer.pos_embed")?;
    let tok = s.graph.embedding(table, instruction)?;
    let pos = s.graph.slice_rows(pos_table, 0, instruction.len())?;
    let text = s.graph.add(tok, pos)?;
    let mut h = s.graph.concat_rows(&[queries, text])?;
    for i in 0..cfg.n_layers {
        let p = format!("qformer.block{i}");
        let n = layernorm(s, &format!("{p}.ln1"), h)?;
        let a = attention(s, &format!("{p}.self"), n, n, cfg.n_heads, false)?;
        h = s.graph.add(h, a)?;
        if cfg.has_cross_attention(i) {
            let q = s.graph.slice_rows(h, 0, nq)?;
            let rest = s.graph.slice_rows(h, nq, instruction.len())?;
            let n = layernorm(s, &format!("{p}.ln_cross"), q)?;
            let c = attention(s, &format!("{p}.cross"), n, img_feats, cfg.n_heads, false)?;
            let q = s.graph.add(q, c)?;
            h = s.graph.concat_rows(&[q, rest])?;
        }
        let n = layernorm(s, &format!("{p}.ln2"), h)?;
        let m = mlp(s, &format!("{p}.mlp"), n)?;
        h = s.graph.add(h, m)?;
    }
    let q = s.graph.slice_rows(h, 0, nq)?;
    layernorm(s, "qformer.ln_f", q)
}
