//! Finite-difference verification of every primitive and of the model's
//! composed blocks, at the small sizes in [`GradCheckConfig`].

use crome_autodiff::{grad_check, relative_error, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{registry, Branch, SHARED_UP};
use crate::config::{QFormerConfig, ToyLmConfig};
use crate::error::Result;
use crate::nn::lm::{lm_specs, llm_forward};
use crate::nn::qformer::{qformer_forward, qformer_specs};
use crate::nn::{block_specs, transformer_block};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::run::GradCheckConfig;
use crate::session::Session;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckEntry {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Checks the gradient of the scalar `f` with respect to every element of
/// the named store parameters.
pub fn session_grad_check<F>(store: &ParamStore, names: &[String], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut s = Session::with_trainable(store, |n| names.iter().any(|k| k == n));
    let out = f(&mut s)?;
    s.graph.backward(out)?;
    let grads = s.trainable_grads();
    drop(s);
    let eval = |st: &ParamStore| -> Result<f64> {
        let mut s = Session::frozen(st);
        let out = f(&mut s)?;
        Ok(s.graph.value(out).item())
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for name in names {
        let n = store.require(name)?.numel();
        for i in 0..n {
            let orig = store.require(name)?.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grads[name].data()[i], numeric));
        }
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// `sum(out ⊙ r)` for a fixed random `r`, so every output element matters.
fn weighted_sum(g: &mut Graph, out: Var, r: &Tensor) -> crome_autodiff::Result<Var> {
    let w = g.constant(r.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn primitive_checks(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckEntry>> {
    let (n, d) = (cfg.seq_len, cfg.d_model);
    let x = randn(&[n, d], rng);
    let other = randn(&[n, d], rng);
    let w = randn(&[d, d + 1], rng);
    let r_nd = randn(&[n, d], rng);
    let r_ndp = randn(&[n, d + 1], rng);
    let r_dn = randn(&[d, n], rng);
    let r_nn = randn(&[n, n], rng);
    let gamma = randn(&[d], rng);
    let beta = randn(&[d], rng);
    let table = randn(&[6, d], rng);
    let ids: Vec<usize> = (0..n).map(|i| (i * 5 + 1) % 6).collect();
    let targets: Vec<usize> = (0..n).map(|i| (i * 3) % d).collect();
    let mask: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
    let eps = cfg.eps;

    type Op<'a> = Box<dyn Fn(&mut Graph, Var) -> crome_autodiff::Result<Var> + 'a>;
    let cases: Vec<(&str, &Tensor, Op)> = vec![
        ("add", &x, Box::new(|g, v| { let o = g.constant(other.clone()); let y = g.add(v, o)?; let y = g.mul(y, y)?; weighted_sum(g, y, &r_nd) })),
        ("mul", &x, Box::new(|g, v| { let o = g.constant(other.clone()); let y = g.mul(v, o)?; let y = g.mul(y, v)?; weighted_sum(g, y, &r_nd) })),
        ("scale", &x, Box::new(|g, v| { let y = g.scale(v, -1.7); let y = g.mul(y, v)?; weighted_sum(g, y, &r_nd) })),
        ("matmul(lhs)", &x, Box::new(|g, v| { let wv = g.constant(w.clone()); let y = g.matmul(v, wv)?; weighted_sum(g, y, &r_ndp) })),
        ("matmul(rhs)", &w, Box::new(|g, v| { let xv = g.constant(x.clone()); let y = g.matmul(xv, v)?; let y = g.mul(y, y)?; weighted_sum(g, y, &r_ndp) })),
        ("transpose", &x, Box::new(|g, v| { let y = g.transpose(v)?; let y = g.mul(y, y)?; weighted_sum(g, y, &r_dn) })),
        ("sigmoid", &x, Box::new(|g, v| { let y = g.sigmoid(v); weighted_sum(g, y, &r_nd) })),
        ("silu", &x, Box::new(|g, v| { let y = g.silu(v); weighted_sum(g, y, &r_nd) })),
        ("gelu", &x, Box::new(|g, v| { let y = g.gelu(v); weighted_sum(g, y, &r_nd) })),
        ("relu", &x, Box::new(|g, v| { let y = g.relu(v); let y = g.mul(y, v)?; weighted_sum(g, y, &r_nd) })),
        ("softmax_rows", &x, Box::new(|g, v| { let y = g.softmax_rows(v)?; weighted_sum(g, y, &r_nd) })),
        ("layernorm", &x, Box::new(|g, v| { let ga = g.constant(gamma.clone()); let be = g.constant(beta.clone()); let y = g.layernorm(v, ga, be, 1e-5)?; weighted_sum(g, y, &r_nd) })),
        ("layernorm(gain)", &gamma, Box::new(|g, v| { let xv = g.constant(x.clone()); let be = g.constant(beta.clone()); let y = g.layernorm(xv, v, be, 1e-5)?; weighted_sum(g, y, &r_nd) })),
        ("layernorm(bias)", &beta, Box::new(|g, v| { let xv = g.constant(x.clone()); let ga = g.constant(gamma.clone()); let y = g.layernorm(xv, ga, v, 1e-5)?; let y = g.mul(y, y)?; weighted_sum(g, y, &r_nd) })),
        ("embedding_lookup", &table, Box::new(|g, v| { let y = g.embedding(v, &ids)?; let y = g.mul(y, y)?; weighted_sum(g, y, &r_nd) })),
        ("concat_seq", &x, Box::new(|g, v| { let o = g.constant(other.clone()); let y = g.concat_rows(&[v, o, v])?; let y = g.mul(y, y)?; let s = g.slice_rows(y, n / 2, n)?; weighted_sum(g, s, &r_nd) })),
        ("slice_cols", &x, Box::new(|g, v| { let a = g.slice_cols(v, 0, 1)?; let b = g.slice_cols(v, 1, d - 1)?; let y = g.concat_cols(&[b, a])?; let y = g.mul(y, v)?; weighted_sum(g, y, &r_nd) })),
        ("causal_mask", &x, Box::new(|g, v| { let t = g.transpose(v)?; let sc = g.matmul(v, t)?; let m = g.causal_mask(sc)?; let p = g.softmax_rows(m)?; weighted_sum(g, p, &r_nn) })),
        ("cross_entropy_next_token", &x, Box::new(|g, v| g.cross_entropy_next_token(v, &targets, &mask))),
    ];
    cases
        .into_iter()
        .map(|(name, input, f)| {
            Ok(GradCheckEntry { name: name.to_string(), max_rel_error: grad_check(f, input, eps)?, checked: input.numel() })
        })
        .collect()
}

fn store_for(specs: &[ParamSpec], seed: u64) -> Result<ParamStore> {
    // zero-initialized tensors would make some gradients vanish identically
    let specs: Vec<ParamSpec> = specs
        .iter()
        .map(|s| match s.init {
            Init::Zeros => ParamSpec::new(s.name.clone(), &s.shape, Init::Normal(0.3)),
            Init::Ones => s.clone(),
            Init::Normal(_) => ParamSpec::new(s.name.clone(), &s.shape, Init::Normal(0.5)),
        })
        .collect();
    ParamStore::from_specs(&specs, seed)
}

fn names(store: &ParamStore) -> Vec<String> {
    store.names().map(String::from).collect()
}

fn block_checks(cfg: &GradCheckConfig, seed: u64, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckEntry>> {
    let d = cfg.d_model;
    let n = cfg.seq_len;
    let mut out = Vec::new();

    // transformer block as used by the vision encoder (bidirectional)
    let store = store_for(&block_specs("vision.block0", d, 2, 0.5, 0.5), seed)?;
    let x = randn(&[n, d], rng);
    let r = randn(&[n, d], rng);
    let err = session_grad_check(&store, &names(&store), cfg.eps, |s| {
        let xv = s.graph.constant(x.clone());
        let y = transformer_block(s, "vision.block0", xv, cfg.n_heads, false)?;
        Ok(weighted_sum(&mut s.graph, y, &r)?)
    })?;
    out.push(GradCheckEntry { name: "vision block".into(), max_rel_error: err, checked: store.numel_where(|_| true) });

    // Q-Former with one cross-attention block and one self-only block
    let qcfg = QFormerConfig { n_queries: 3, hidden_dim: d, n_layers: 2, n_heads: cfg.n_heads, cross_attn_every: 2, max_instruction_len: 4, mlp_ratio: 2 };
    let d_img = d + 2;
    let store = store_for(&qformer_specs(&qcfg, 7, d_img), seed)?;
    let feats = randn(&[n, d_img], rng);
    let r = randn(&[qcfg.n_queries, d], rng);
    let instr = [3usize, 0, 5];
    let err = session_grad_check(&store, &names(&store), cfg.eps, |s| {
        let f = s.graph.constant(feats.clone());
        let y = qformer_forward(s, &qcfg, &instr, f)?;
        Ok(weighted_sum(&mut s.graph, y, &r)?)
    })?;
    out.push(GradCheckEntry { name: "qformer".into(), max_rel_error: err, checked: store.numel_where(|_| true) });

    // language model: causal block, head, next-token loss
    let lcfg = ToyLmConfig { vocab_size: 7, embed_dim: d, n_layers: 1, n_heads: cfg.n_heads, max_seq_len: n + 2, mlp_ratio: 2 };
    let store = store_for(&lm_specs(&lcfg), seed)?;
    let emb = randn(&[n, d], rng);
    let targets: Vec<usize> = (0..n).map(|i| (i * 4 + 1) % 7).collect();
    let mask = vec![true; n];
    let trainable: Vec<String> = names(&store).into_iter().filter(|k| k != "lm.tok_embed").collect();
    let err = session_grad_check(&store, &trainable, cfg.eps, |s| {
        let e = s.graph.constant(emb.clone());
        let logits = llm_forward(s, &lcfg, e)?;
        Ok(s.graph.cross_entropy_next_token(logits, &targets, &mask)?)
    })?;
    out.push(GradCheckEntry { name: "lm block".into(), max_rel_error: err, checked: store.numel_where(|k| k != "lm.tok_embed") });

    // both adapter variants, both branches through the shared up-projection
    for kind in ["gated", "ungated"] {
        let adapter = registry().get(kind)?;
        let store = store_for(&adapter.param_specs(d, cfg.bottleneck, 0.5), seed)?;
        assert!(store.contains(SHARED_UP));
        let xi = randn(&[n, d], rng);
        let xt = randn(&[n - 1, d], rng);
        let ri = randn(&[n, d], rng);
        let rt = randn(&[n - 1, d], rng);
        let err = session_grad_check(&store, &names(&store), cfg.eps, |s| {
            let a = s.graph.constant(xi.clone());
            let b = s.graph.constant(xt.clone());
            let ya = adapter.apply(s, Branch::Image, a)?;
            let yb = adapter.apply(s, Branch::Text, b)?;
            let la = weighted_sum(&mut s.graph, ya, &ri)?;
            let lb = weighted_sum(&mut s.graph, yb, &rt)?;
            Ok(s.graph.add(la, lb)?)
        })?;
        out.push(GradCheckEntry { name: format!("{kind} adapter"), max_rel_error: err, checked: store.numel_where(|_| true) });
        // and with respect to the branch input
        let err = grad_check(
            |g, v| {
                let wd = g.constant(store.get(&Branch::Image.down_name()).unwrap().clone());
                let wu = g.constant(store.get(SHARED_UP).unwrap().clone());
                let h = g.matmul(v, wd)?;
                let act = g.silu(h);
                let z = if kind == "gated" {
                    let wg = g.constant(store.get(&Branch::Image.gate_name()).unwrap().clone());
                    let gate = g.matmul(v, wg)?;
                    g.mul(act, gate)?
                } else {
                    act
                };
                let delta = g.matmul(z, wu)?;
                let y = g.add(v, delta)?;
                weighted_sum(g, y, &ri)
            },
            &xi,
            cfg.eps,
        )?;
        out.push(GradCheckEntry { name: format!("{kind} adapter (input)"), max_rel_error: err, checked: xi.numel() });
    }
    Ok(out)
}

/// Every primitive, then the vision block, Q-Former, LM block and both
/// adapter variants.
pub fn run_grad_checks(cfg: &GradCheckConfig, seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = primitive_checks(cfg, &mut rng)?;
    out.extend(block_checks(cfg, seed, &mut rng)?);
    Ok(out)
}
