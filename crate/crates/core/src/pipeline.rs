//! Stage sequencing shared by the CLI, the ablation grid and the sweep.

use crate::error::Result;
use crate::eval::scorer::{scorers, ScoringContext};
use crate::eval::{evaluate_mc, EvalReport};
use crate::model::Model;
use crate::run::RunConfig;
use crate::train::{train_stage, Stage, StageConfig, StageOutcome, TrainOptions};

/// Trains `stage` in place. `instruct_scale` multiplies the instruction
/// data; `trainable` overrides the stage's freeze mask.
pub fn run_stage(
    run: &RunConfig,
    model: &mut Model,
    stage: Stage,
    instruct_scale: usize,
    trainable: Option<Vec<String>>,
    opts: &TrainOptions,
) -> Result<StageOutcome> {
    let mut cfg: StageConfig = run.stages.get(stage).clone();
    if trainable.is_some() {
        cfg.trainable = trainable;
    }
    let data = run.stage_data(stage, instruct_scale)?;
    train_stage(model, &cfg, &data, &run.preprocess, opts)
}

/// Fresh model carried through the text-only LM stage.
pub fn lm_pretrained(run: &RunConfig, opts: &TrainOptions) -> Result<(Model, StageOutcome)> {
    let mut model = Model::init(run.model.clone(), run.seed)?;
    let out = run_stage(run, &mut model, Stage::LmPretrain, 1, None, opts)?;
    Ok((model, out))
}

/// Held-out task accuracy under the named scorer.
pub fn evaluate_heldout(run: &RunConfig, model: &Model, scorer: &str, fingerprint: &str) -> Result<EvalReport> {
    let samples = run.eval_data()?;
    let ctx = ScoringContext { model, preprocess: &run.preprocess, seed: run.seed };
    evaluate_mc(&ctx, &samples, scorers().get(scorer)?, fingerprint)
}
