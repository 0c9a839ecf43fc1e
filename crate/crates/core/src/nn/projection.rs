use crome_autodiff::Var;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::{Init, ParamSpec};
use crate::session::Session;

/// Bias-free linear map into the language model width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectionLayer {
    pub name: &'static str,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ProjectionLayer {
    /// Projects Q-Former query outputs.
    pub fn text(cfg: &ModelConfig) -> Self {
        Self { name: "proj.txt", in_dim: cfg.qformer.hidden_dim, out_dim: cfg.d_llm() }
    }

    /// Projects raw vision-encoder patch features.
    pub fn image(cfg: &ModelConfig) -> Self {
        Self { name: "proj.img", in_dim: cfg.vision.embed_dim, out_dim: cfg.d_llm() }
    }

    pub fn spec(&self) -> ParamSpec {
        ParamSpec::new(self.name, &[self.in_dim, self.out_dim], Init::Normal(0.02))
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn apply(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.name)?;
        Ok(s.graph.matmul(x, w)?)
    }
}
