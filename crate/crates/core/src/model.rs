//! The assembled pipeline: frozen vision encoder and LM, Q-Former-lite,
//! projections and the fusion adapter, all over one [`ParamStore`].

use crome_autodiff::{Tensor, Var};

use crate::adapter::{assemble_llm_input, registry, Branch, FusionAdapter};
use crate::config::ModelConfig;
use crate::data::vocab::Vocab;
use crate::error::{CromeError, Result};
use crate::nn::lm::{embed_tokens, llm_forward, lm_specs};
use crate::nn::projection::ProjectionLayer;
use crate::nn::qformer::{qformer_forward, qformer_specs};
use crate::nn::vision::{encode_image, vision_specs};
use crate::params::{ParamSpec, ParamStore};
use crate::session::Session;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

pub fn model_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let adapter = registry().get(&cfg.adapter.kind)?;
    let mut specs = vision_specs(&cfg.vision);
    specs.extend(lm_specs(&cfg.lm));
    specs.extend(qformer_specs(&cfg.qformer, cfg.lm.vocab_size, cfg.vision.embed_dim));
    specs.push(ProjectionLayer::text(cfg).spec());
    specs.push(ProjectionLayer::image(cfg).spec());
    specs.extend(adapter.param_specs(cfg.d_llm(), cfg.adapter.bottleneck, cfg.adapter.init_std));
    Ok(specs)
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.lm.vocab_size != Vocab::standard().len() {
            return Err(CromeError::Config(format!(
                "lm.vocab_size {} but the task vocabulary has {} words",
                cfg.lm.vocab_size,
                Vocab::standard().len()
            )));
        }
        let store = ParamStore::from_specs(&model_specs(&cfg)?, seed)?;
        Ok(Self { cfg, store })
    }

    pub fn adapter(&self) -> Result<&'static dyn FusionAdapter> {
        registry().get(&self.cfg.adapter.kind)
    }

    /// Frozen penultimate-layer patch features for a preprocessed image.
    pub fn image_features(&self, image: &Tensor) -> Result<Tensor> {
        encode_image(&self.store, image, &self.cfg.vision)
    }

    /// Q-Former query outputs computed outside any training graph.
    pub fn qformer_output(&self, features: &Tensor, instruction: &[usize]) -> Result<Tensor> {
        let mut s = Session::frozen(&self.store);
        let f = s.graph.constant(features.clone());
        let q = qformer_forward(&mut s, &self.cfg.qformer, instruction, f)?;
        Ok(s.graph.value(q).clone())
    }

    /// LM input prefix for one sample. `qformer_cache` replaces the Q-Former
    /// forward when the Q-Former is frozen.
    pub fn multimodal_prefix(
        &self,
        s: &mut Session,
        features: &Tensor,
        instruction: &[usize],
        qformer_cache: Option<&Tensor>,
    ) -> Result<Var> {
        let feats = s.graph.constant(features.clone());
        let q = match qformer_cache {
            Some(c) => s.graph.constant(c.clone()),
            None => qformer_forward(s, &self.cfg.qformer, instruction, feats)?,
        };
        let txt = ProjectionLayer::text(&self.cfg).apply(s, q)?;
        let img = ProjectionLayer::image(&self.cfg).apply(s, feats)?;
        let adapter = self.adapter()?;
        let txt = adapter.apply(s, Branch::Text, txt)?;
        let img = adapter.apply(s, Branch::Image, img)?;
        let question = embed_tokens(s, instruction)?;
        assemble_llm_input(s, self.cfg.sequence_order, question, txt, img)
    }

    pub fn text_prefix(&self, s: &mut Session, tokens: &[usize]) -> Result<Var> {
        embed_tokens(s, tokens)
    }

    /// Mean next-token loss over `target ∥ <eos>` following `prefix`.
    pub fn sequence_loss(&self, s: &mut Session, prefix: Var, target: &[usize]) -> Result<Var> {
        let mut full = target.to_vec();
        full.push(Vocab::standard().eos());
        let (logits, p) = self.continuation_logits(s, prefix, &full)?;
        let rows = s.graph.value(logits).rows();
        let mut targets = vec![0; rows];
        let mut mask = vec![false; rows];
        for (j, &tok) in full.iter().enumerate() {
            targets[p - 1 + j] = tok;
            mask[p - 1 + j] = true;
        }
        Ok(s.graph.cross_entropy_next_token(logits, &targets, &mask)?)
    }

    /// Runs the LM over `prefix ∥ embed(tokens[..n-1])`. Row `p - 1 + j`
    /// of the returned logits predicts `tokens[j]`.
    fn continuation_logits(&self, s: &mut Session, prefix: Var, tokens: &[usize]) -> Result<(Var, usize)> {
        let p = s.graph.value(prefix).rows();
        if p == 0 {
            return Err(CromeError::Contract("continuation needs a non-empty prefix".into()));
        }
        if tokens.is_empty() {
            return Err(CromeError::Contract("continuation needs at least one token".into()));
        }
        let body = embed_tokens(s, &tokens[..tokens.len() - 1])?;
        let input = s.graph.concat_rows(&[prefix, body])?;
        let logits = llm_forward(s, &self.cfg.lm, input)?;
        Ok((logits, p))
    }

    /// Total log-probability of `tokens` following `prefix` (no end token).
    pub fn continuation_logprob(&self, s: &mut Session, prefix: Var, tokens: &[usize]) -> Result<f64> {
        let (logits, p) = self.continuation_logits(s, prefix, tokens)?;
        let lv = s.graph.value(logits);
        let mut total = 0.0;
        for (j, &tok) in tokens.iter().enumerate() {
            let row = lv.row(p - 1 + j);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += row[tok] - lse;
        }
        Ok(total)
    }

    /// Copy of this model with another adapter strategy. Shared parameters
    /// are kept; the new adapter's parameters are freshly initialized.
    pub fn with_adapter(&self, kind: &str, bottleneck: usize, seed: u64) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.adapter.kind = kind.to_string();
        cfg.adapter.bottleneck = bottleneck;
        let fresh = Model::init(cfg.clone(), seed)?;
        let mut store = ParamStore::new();
        for (name, value) in fresh.store.iter() {
            let keep = !name.starts_with("adapter.") && self.store.contains(name);
            store.insert(name, if keep { self.store.get(name).unwrap().clone() } else { value.clone() });
        }
        Ok(Self { cfg, store })
    }
}
