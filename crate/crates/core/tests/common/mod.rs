#![allow(dead_code)]

use crome_core::data::tasks::TaskKind;
use crome_core::run::{DatasetSpec, RunConfig};
use crome_core::train::Stage;

/// Toy run shrunk to a few steps and a few dozen records per dataset.
pub fn tiny_run(steps: usize) -> RunConfig {
    let mut run = RunConfig::toy();
    run.data.lm_corpus_size = 64;
    run.data.pretrain = vec![DatasetSpec::new("caption", TaskKind::Caption, 24)];
    run.data.instruct = vec![
        DatasetSpec::new("caption", TaskKind::Caption, 8),
        DatasetSpec::new("count-qa", TaskKind::CountQa, 16),
        DatasetSpec::new("mc-qa", TaskKind::McQa, 8),
    ];
    run.data.finetune = vec![DatasetSpec::new("position-mc", TaskKind::PositionMc, 16)];
    run.data.eval_size = 12;
    run.data.extra_instruct_factor = 2;
    for st in Stage::ALL {
        let c = run.stages.get_mut(st);
        c.max_steps = steps;
        c.warmup_steps = steps / 2;
        c.batch_size = 4;
        // large enough that a few steps visibly move the weights
        c.lr_peak = 1e-3;
    }
    run
}
