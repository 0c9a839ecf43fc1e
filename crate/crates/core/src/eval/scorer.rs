//! Multiple-choice scoring strategies, selected by name.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::preprocess::{preprocess, Mode, PreprocessSpec};
use crate::data::vocab::Vocab;
use crate::data::Sample;
use crate::error::{CromeError, Result};
use crate::model::Model;
use crate::params::derive_seed;
use crate::session::Session;

/// What a scorer may consult besides the sample itself.
pub struct ScoringContext<'a> {
    pub model: &'a Model,
    pub preprocess: &'a PreprocessSpec,
    pub seed: u64,
}

pub trait ChoiceScorer: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// One score per choice; higher is better.
    fn scores(&self, ctx: &ScoringContext, sample: &Sample, index: usize) -> Result<Vec<f64>>;
}

/// Total log-likelihood of each choice's tokens given the multimodal prefix.
#[derive(Debug, Default)]
pub struct LikelihoodScorer;

/// Independent uniform scores per choice: a chance-level baseline.
#[derive(Debug, Default)]
pub struct UniformRandomScorer;

/// Scores the gold choice 0 and every other choice -1.
#[derive(Debug, Default)]
pub struct OracleScorer;

impl ChoiceScorer for LikelihoodScorer {
    fn name(&self) -> &'static str {
        "likelihood"
    }

    fn scores(&self, ctx: &ScoringContext, sample: &Sample, _index: usize) -> Result<Vec<f64>> {
        let choices = choices_of(sample)?;
        let image = preprocess(&sample.image, ctx.preprocess, Mode::Eval, 0)?;
        let features = ctx.model.image_features(&image)?;
        let mut s = Session::frozen(&ctx.model.store);
        let prefix = ctx.model.multimodal_prefix(&mut s, &features, &sample.instruction, None)?;
        let vocab = Vocab::standard();
        choices
            .iter()
            .map(|c| ctx.model.continuation_logprob(&mut s, prefix, &vocab.tokenize(c)?))
            .collect()
    }
}

impl ChoiceScorer for UniformRandomScorer {
    fn name(&self) -> &'static str {
        "uniform-random"
    }

    fn scores(&self, ctx: &ScoringContext, sample: &Sample, index: usize) -> Result<Vec<f64>> {
        let n = choices_of(sample)?.len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, &format!("uniform/{index}")));
        Ok((0..n).map(|_| rng.random::<f64>()).collect())
    }
}

impl ChoiceScorer for OracleScorer {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn scores(&self, _ctx: &ScoringContext, sample: &Sample, _index: usize) -> Result<Vec<f64>> {
        let gold = sample.gold_text()?;
        Ok(choices_of(sample)?.iter().map(|c| if *c == gold { 0.0 } else { -1.0 }).collect())
    }
}

pub(crate) fn choices_of(sample: &Sample) -> Result<&[String]> {
    match &sample.choices {
        Some(c) if c.len() >= 2 => Ok(c),
        Some(c) => Err(CromeError::Contract(format!("{}: {} choice(s), need at least 2", sample.tag, c.len()))),
        None => Err(CromeError::Contract(format!("{}: sample has no choices", sample.tag))),
    }
}

#[derive(Debug)]
pub struct ScorerRegistry {
    entries: BTreeMap<&'static str, Box<dyn ChoiceScorer>>,
}

impl ScorerRegistry {
    pub fn builtin() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register(Box::new(LikelihoodScorer));
        r.register(Box::new(UniformRandomScorer));
        r.register(Box::new(OracleScorer));
        r
    }

    pub fn register(&mut self, scorer: Box<dyn ChoiceScorer>) {
        self.entries.insert(scorer.name(), scorer);
    }

    pub fn get(&self, name: &str) -> Result<&dyn ChoiceScorer> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            CromeError::Config(format!(
                "unknown scorer {name:?}; registered: {}",
                self.entries.keys().copied().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

pub fn scorers() -> &'static ScorerRegistry {
    static REGISTRY: OnceLock<ScorerRegistry> = OnceLock::new();
    REGISTRY.get_or_init(ScorerRegistry::builtin)
}
