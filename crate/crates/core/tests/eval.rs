mod common;

use crome_core::data::tasks::{generate_dataset, TaskKind};
use crome_core::data::Sample;
use crome_core::eval::scorer::{scorers, ChoiceScorer, ScoringContext};
use crome_core::eval::{
    ablation_grid, argmax_lowest, evaluate_mc, fingerprint, run_ablation_grid, zero_vs_finetune_report,
    FinetuneStrategy, LikelihoodScorer, OracleScorer, UniformRandomScorer,
};
use crome_core::model::Model;
use crome_core::pipeline::{evaluate_heldout, lm_pretrained, run_stage};
use crome_core::run::RunConfig;
use crome_core::train::{Stage, TrainOptions};
use crome_core::CromeError;

use common::tiny_run;

fn mc_samples(n: usize, seed: u64) -> Vec<Sample> {
    generate_dataset(TaskKind::PositionMc, n, seed, 16).unwrap().samples
}

#[test]
fn oracle_scores_perfectly() {
    let run = tiny_run(1);
    let m = Model::init(run.model.clone(), 0).unwrap();
    let ctx = ScoringContext { model: &m, preprocess: &run.preprocess, seed: 0 };
    let r = evaluate_mc(&ctx, &mc_samples(200, 1), &OracleScorer, "fp").unwrap();
    assert_eq!(r.accuracy.numerator, 200);
    assert_eq!(r.accuracy.value(), 1.0);
}

#[test]
fn uniform_scorer_sits_at_chance() {
    let run = tiny_run(1);
    let m = Model::init(run.model.clone(), 0).unwrap();
    let ctx = ScoringContext { model: &m, preprocess: &run.preprocess, seed: 17 };
    let samples = mc_samples(10_000, 2);
    let r = evaluate_mc(&ctx, &samples, &UniformRandomScorer, "fp").unwrap();
    assert!((r.accuracy.value() - 0.25).abs() <= 0.02, "{}", r.accuracy);
    // the same seed gives the same predictions
    let again = evaluate_mc(&ctx, &samples[..500], &UniformRandomScorer, "fp").unwrap();
    assert_eq!(again.records, r.records[..500]);
}

#[test]
fn duplicated_gold_choice_is_rejected() {
    let run = tiny_run(1);
    let m = Model::init(run.model.clone(), 0).unwrap();
    let ctx = ScoringContext { model: &m, preprocess: &run.preprocess, seed: 0 };
    let mut s = mc_samples(1, 3);
    let gold = s[0].gold_text().unwrap();
    let choices = s[0].choices.as_mut().unwrap();
    let other = choices.iter().position(|c| *c != gold).unwrap();
    choices[other] = gold;
    assert!(matches!(evaluate_mc(&ctx, &s, &OracleScorer, "fp"), Err(CromeError::Contract(_))));

    let mut s = mc_samples(1, 3);
    s[0].choices = None;
    assert!(matches!(evaluate_mc(&ctx, &s, &OracleScorer, "fp"), Err(CromeError::Contract(_))));
    assert!(evaluate_mc(&ctx, &[], &OracleScorer, "fp").is_err());
}

#[test]
fn ties_go_to_the_lowest_index() {
    assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 0.0]), 1);
    assert_eq!(argmax_lowest(&[2.0, 2.0]), 0);
    assert_eq!(argmax_lowest(&[-1.0, -0.5, -2.0]), 1);
}

#[test]
fn scorer_registry() {
    let names: Vec<_> = scorers().names().collect();
    assert!(names.contains(&"likelihood") && names.contains(&"oracle") && names.contains(&"uniform-random"));
    assert!(scorers().get("vibes").is_err());
    assert_eq!(LikelihoodScorer.name(), "likelihood");
}

#[test]
fn likelihood_eval_is_deterministic() {
    let run = tiny_run(1);
    let m = Model::init(run.model.clone(), 5).unwrap();
    let a = evaluate_heldout(&run, &m, "likelihood", "x").unwrap();
    let b = evaluate_heldout(&run, &m, "likelihood", "x").unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    assert_eq!(a.n_samples, run.data.eval_size);
    assert_eq!(a.to_jsonl().lines().count(), run.data.eval_size + 1);
    assert!(a.records.iter().all(|r| r.scores.len() == 4 && r.scores.iter().all(|s| *s < 0.0)));
}

#[test]
fn fingerprints_are_label_sensitive() {
    let a = fingerprint(&[("a", "bc")]);
    assert_eq!(a, fingerprint(&[("a", "bc")]));
    assert_ne!(a, fingerprint(&[("ab", "c")]));
    assert_eq!(a.len(), 64);
}

#[test]
fn run_config_canonical_form() {
    let run = RunConfig::toy();
    let text = run.canonical();
    let back = RunConfig::from_toml(&text).unwrap();
    assert_eq!(back, run);
    assert_eq!(back.fingerprint(), run.fingerprint());
    let mut other = run.clone();
    other.seed += 1;
    assert_ne!(other.fingerprint(), run.fingerprint());
    let mut moved = run.clone();
    moved.out_dir = "elsewhere".into();
    assert_eq!(moved.fingerprint(), run.fingerprint());
    assert!(RunConfig::from_toml("seed = 1\nunknown_key = 2").is_err());
    let mut bad = run.clone();
    bad.data.image_size = 32;
    assert!(bad.validate().is_err());
}

#[test]
fn ablation_grid_axes() {
    let g = ablation_grid();
    assert_eq!(g.len(), 7);
    assert_eq!(g.iter().map(|v| v.row).collect::<Vec<_>>(), (1..=7).collect::<Vec<_>>());
    assert_eq!(g[0].adapter_kind(), "none");
    // rows 2 and 3 differ only in gating
    let (r2, r3) = (&g[1], &g[2]);
    assert_eq!(r2.adapter_kind(), "ungated");
    assert_eq!(r3.adapter_kind(), "gated");
    assert_eq!((r2.pretrain, r2.extra_instruct_data, r2.finetune), (r3.pretrain, r3.extra_instruct_data, r3.finetune));
    assert!(!g[3].pretrain);
    assert!(g[4].extra_instruct_data);
    assert_eq!(g[5].finetune, FinetuneStrategy::QformerProj);
    assert_eq!((g[6].adapter_kind(), g[6].finetune, g[6].extra_instruct_data), ("gated", FinetuneStrategy::Adapter, true));
}

#[test]
fn ablation_grid_runs_every_row_and_isolates_failures() {
    let mut run = tiny_run(2);
    let (base, _) = lm_pretrained(&run, &TrainOptions::default()).unwrap();
    // row 7 fine-tunes with the stage mask; make it invalid
    run.stages.finetune.trainable = Some(vec!["lm.head".into()]);
    let mut seen = 0;
    let table = run_ablation_grid(&run, &ablation_grid(), &base, &TrainOptions::default(), &mut |_| seen += 1);
    assert_eq!(seen, 7);
    for r in &table.rows[..6] {
        assert!(r.ok, "row {} failed: {:?}", r.variant.row, r.error);
        assert!(r.zero_shot.is_some());
    }
    assert_eq!(table.rows[0].delta_vs_row1, Some(0.0));
    assert!(table.rows[5].finetuned.is_some());
    assert!(!table.rows[6].ok);
    assert!(table.to_tsv().lines().nth(7).unwrap().contains("failed"));
    let fps: std::collections::BTreeSet<_> = table.rows.iter().map(|r| r.fingerprint.clone()).collect();
    assert_eq!(fps.len(), 7);
    assert!(table.rows.iter().all(|r| r.data_fingerprint == table.rows[0].data_fingerprint));
}

#[test]
fn paired_report_trains_only_the_adapter() {
    let run = tiny_run(2);
    let (mut m, _) = lm_pretrained(&run, &TrainOptions::default()).unwrap();
    for st in [Stage::Pretrain, Stage::Instruct] {
        run_stage(&run, &mut m, st, 1, None, &TrainOptions::default()).unwrap();
    }
    let before = m.store.hashes();
    let report = zero_vs_finetune_report(&run, &mut m, true, &TrainOptions::default()).unwrap();
    assert_eq!(report.trainable_params, 5 * 64 * 16);
    let after = m.store.hashes();
    for (k, h) in &after {
        if !k.starts_with("adapter.") {
            assert_eq!(h, &before[k], "{k}");
        }
    }
    let ft = report.finetuned.unwrap();
    assert_eq!(report.delta, Some(ft.accuracy.value() - report.zero_shot.accuracy.value()));
}
