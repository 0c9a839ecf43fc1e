//! End-to-end acceptance checks. Each test prints one `criterion N ... PASS`
//! or `FAIL` line straight to stderr so it shows up without `--nocapture`.
//! The tests hold a shared lock so wall-clock limits are measured alone.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crome_core::data::sampler::BalancedSampler;
use crome_core::data::tasks::TaskKind;
use crome_core::eval::AblationTable;
use crome_core::model::Model;
use crome_core::pipeline::run_stage;
use crome_core::run::{DatasetSpec, RunConfig};
use crome_core::train::{build_freeze_mask, Checkpoint, Stage, StageConfig, TrainOptions, Trainer};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, what: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n} {what}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn crome(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crome")).args(args).output().expect("crome binary runs")
}

fn stdout_of(out: &Output, what: &str) -> String {
    assert!(
        out.status.success(),
        "{what} exited with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, run: &RunConfig) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, run.canonical()).unwrap();
    path.to_str().unwrap().to_string()
}

/// Toy run with every stage cut to `steps` and small datasets.
fn reduced_run(steps: usize) -> RunConfig {
    let mut run = RunConfig::toy();
    run.data.lm_corpus_size = 200;
    run.data.pretrain = vec![DatasetSpec::new("caption", TaskKind::Caption, 64)];
    run.data.instruct = vec![
        DatasetSpec::new("caption", TaskKind::Caption, 16),
        DatasetSpec::new("count-qa", TaskKind::CountQa, 32),
        DatasetSpec::new("attribute-qa", TaskKind::AttributeQa, 32),
        DatasetSpec::new("mc-qa", TaskKind::McQa, 16),
    ];
    run.data.finetune = vec![DatasetSpec::new("position-mc", TaskKind::PositionMc, 32)];
    run.data.eval_size = 24;
    run.data.extra_instruct_factor = 2;
    for st in Stage::ALL {
        let c = run.stages.get_mut(st);
        c.max_steps = steps;
        c.warmup_steps = steps / 4;
        c.batch_size = 4;
    }
    run
}

fn accuracy_line(stdout: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("accuracy "))
        .and_then(|v| v.trim().parse().ok())
        .expect("eval prints an accuracy line")
}

#[test]
fn criterion_1_parameter_accounting() {
    let _g = serial();
    let started = Instant::now();
    let out = crome(&["report-params", "--dim-a", "4096", "--dim-b", "5120", "--bottleneck", "256"]);
    let elapsed = started.elapsed();
    let text = stdout_of(&out, "report-params");
    let want = [
        "adapter (d=4096): 5242880 trainable (5.24M)",
        "adapter (d=5120): 6553600 trainable (6.55M)",
        "delta 4096 -> 5120: 3538944 (3.54M); closed form 3538944",
        "reference totals 199.85M -> 203.39M, delta 3.54M: match",
        "reference adapter 5.24M: match",
    ];
    let missing: Vec<&str> = want.iter().copied().filter(|w| !text.contains(w)).collect();
    // 203.39 - 199.85 = 3.54 within the 0.01M display rounding
    let table_delta = (203.39f64 - 199.85) * 1e6;
    let delta_ok = (3_538_944.0 - table_delta).abs() <= 0.01e6;
    let pass = missing.is_empty() && delta_ok && elapsed < Duration::from_secs(1);
    report(1, "parameter accounting", pass, &format!("missing {missing:?}, delta ok {delta_ok}, {elapsed:.2?}"));
}

#[test]
fn criterion_2_gradient_check() {
    let _g = serial();
    let started = Instant::now();
    let out = crome(&["grad-check"]);
    let elapsed = started.elapsed();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let worst = text
        .lines()
        .find_map(|l| l.strip_prefix("max relative error "))
        .and_then(|l| l.split_whitespace().next())
        .and_then(|v| v.parse::<f64>().ok())
        .unwrap_or(f64::INFINITY);
    let names: Vec<&str> = text.lines().filter_map(|l| l.split_whitespace().next()).collect();
    let required = [
        "add", "mul", "scale", "matmul(lhs)", "matmul(rhs)", "transpose", "sigmoid", "silu", "gelu", "relu",
        "softmax_rows", "layernorm", "embedding_lookup", "concat_seq", "slice_cols", "causal_mask",
        "cross_entropy_next_token", "qformer", "lm", "gated", "ungated",
    ];
    let covered = required.iter().all(|want| names.contains(want));
    let pass = out.status.success() && worst < 1e-4 && covered && elapsed < Duration::from_secs(300);
    report(2, "gradient correctness", pass, &format!("max rel error {worst:.3e}, coverage {covered}, {elapsed:.1?}"));
}

#[test]
fn criterion_3_frozen_tensors_do_not_move() {
    let _g = serial();
    let started = Instant::now();
    let mut run = RunConfig::toy();
    for st in Stage::ALL {
        let c = run.stages.get_mut(st);
        c.max_steps = 100;
        c.warmup_steps = 10;
    }
    let mut model = Model::init(run.model.clone(), run.seed).unwrap();
    let mut problems = Vec::new();
    let mut finetune_moved = Vec::new();
    for stage in Stage::ALL {
        let before = model.store.hashes();
        let out = run_stage(&run, &mut model, stage, 1, None, &TrainOptions::default()).unwrap();
        assert_eq!(out.metrics.len(), 100);
        let mask = build_freeze_mask(stage);
        let mut moved = 0;
        for (name, hash) in model.store.hashes() {
            if hash == before[&name] {
                continue;
            }
            if !mask.is_trainable(&name) {
                problems.push(format!("{stage} changed {name}"));
            }
            if stage == Stage::Finetune {
                finetune_moved.push(name.clone());
            }
            moved += 1;
        }
        if moved == 0 {
            problems.push(format!("{stage} changed nothing"));
        }
    }
    let adapter_only = !finetune_moved.is_empty() && finetune_moved.iter().all(|n| n.starts_with("adapter."));
    let elapsed = started.elapsed();
    let pass = problems.is_empty() && adapter_only && elapsed < Duration::from_secs(120);
    report(
        3,
        "freezing",
        pass,
        &format!("{} violations, finetune moved {} adapter tensors only, {elapsed:.1?}", problems.len(), finetune_moved.len()),
    );
}

#[test]
fn criterion_4_identity_at_init() {
    let _g = serial();
    let mut run = reduced_run(20);
    run.data.pretrain = vec![DatasetSpec::new("caption", TaskKind::Caption, 256)];
    let mut base = Model::init(run.model.clone(), run.seed).unwrap();
    run_stage(&run, &mut base, Stage::LmPretrain, 1, None, &TrainOptions::default()).unwrap();
    let gated = base.with_adapter("gated", run.model.adapter.bottleneck, run.seed).unwrap();
    let control = base.with_adapter("none", run.model.adapter.bottleneck, run.seed).unwrap();
    let up = gated.store.require("adapter.shared.up").unwrap();
    let zero_up = up.data().iter().all(|v| *v == 0.0);
    let mut detail = Vec::new();
    let mut pass = zero_up;
    for stage in [Stage::Pretrain, Stage::Instruct] {
        let data = run.stage_data(stage, 1).unwrap();
        let mut losses = Vec::new();
        for m in [&gated, &control] {
            let mut m = Model { cfg: m.cfg.clone(), store: m.store.clone() };
            let mut t = Trainer::new(&mut m, run.stages.get(stage).clone(), &data, run.preprocess.clone()).unwrap();
            losses.push(t.train_step().unwrap().loss);
        }
        let same = losses[0].to_bits() == losses[1].to_bits();
        pass &= same;
        detail.push(format!("{stage} {:.17} vs {:.17}", losses[0], losses[1]));
    }
    report(4, "identity at init", pass, &format!("zero up-projection {zero_up}, {}", detail.join(", ")));
}

#[test]
fn criterion_5_sampler_statistics() {
    let _g = serial();
    let started = Instant::now();
    let sizes = [100, 400, 2500];
    let want = [0.125, 0.25, 0.625];
    let draws = 100_000;
    let mut counts = [0usize; 3];
    for d in BalancedSampler::new(&sizes, 17).unwrap().take(draws) {
        counts[d] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|c| *c as f64 / draws as f64).collect();
    let within = freqs.iter().zip(want).all(|(f, w)| (f - w).abs() <= 0.01);
    let elapsed = started.elapsed();
    report(5, "sampler statistics", within && elapsed < Duration::from_secs(5), &format!("{freqs:?}, {elapsed:.2?}"));
}

#[test]
fn criterion_6_adapter_only_finetuning_closes_the_gap() {
    let _g = serial();
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut banners = BTreeMap::new();
    for stage in ["lm-pretrain", "pretrain", "instruct", "finetune"] {
        let text = stdout_of(&crome(&["--out", out, "train", "--stage", stage]), stage);
        let banner = text.lines().find(|l| l.starts_with("stage ")).unwrap().to_string();
        banners.insert(stage, banner);
    }
    let instruct = format!("{out}/instruct.ckpt");
    let finetune = format!("{out}/finetune.ckpt");
    let zero = accuracy_line(&stdout_of(&crome(&["--out", out, "--checkpoint", &instruct, "eval"]), "zero-shot eval"));
    let tuned = accuracy_line(&stdout_of(&crome(&["--out", out, "--checkpoint", &finetune, "eval"]), "finetuned eval"));

    let d = RunConfig::toy().model.d_llm();
    let m = RunConfig::toy().model.adapter.bottleneck;
    let count_ok = banners["finetune"].starts_with(&format!("stage finetune: {} trainable parameters", 5 * d * m));
    let a = Checkpoint::load(Path::new(&instruct)).unwrap();
    let b = Checkpoint::load(Path::new(&finetune)).unwrap();
    let pa: BTreeMap<&str, _> = a.params().collect();
    let changed: Vec<&str> = b.params().filter(|(k, v)| pa.get(k) != Some(v)).map(|(k, _)| k).collect();
    let adapter_only = !changed.is_empty() && changed.iter().all(|k| k.starts_with("adapter."));
    let elapsed = started.elapsed();
    let pass = zero <= 0.40 && tuned >= 0.85 && count_ok && adapter_only && elapsed <= Duration::from_secs(30 * 60);
    report(
        6,
        "zero-shot vs adapter-only finetune",
        pass,
        &format!(
            "zero-shot {zero:.4} (<= 0.40), finetuned {tuned:.4} (>= 0.85), trainable 5dm = {} {count_ok}, adapter-only {adapter_only}, {elapsed:.0?}",
            5 * d * m
        ),
    );
}

#[test]
fn criterion_7_ablation_grid() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let run = reduced_run(12);
    let config = write_config(dir.path(), &run);
    let out = dir.path().join("out");
    let result = crome(&["--config", &config, "--out", out.to_str().unwrap(), "ablate"]);
    let text = stdout_of(&result, "ablate");
    let table: AblationTable = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let tsv_rows = std::fs::read_to_string(out.join("ablation.tsv")).unwrap().lines().count() - 1;

    let rows_ok = table.rows.len() == 7 && tsv_rows == 7 && table.rows.iter().all(|r| r.ok);
    let deltas_ok = table.rows.iter().all(|r| {
        let (Some(d), Some(h), Some(b)) = (r.delta_vs_row1, r.headline, table.rows[0].headline) else { return false };
        (d - (h.value() - b.value())).abs() < 1e-12
    }) && table.rows[0].delta_vs_row1 == Some(0.0);

    let ungated = table.rows.iter().find(|r| r.variant.label == "ungated").unwrap();
    let gated = table.rows.iter().find(|r| r.variant.label == "gated").unwrap();
    let mut flipped = ungated.variant.clone();
    flipped.gated = true;
    flipped.row = gated.variant.row;
    flipped.label = gated.variant.label.clone();
    let pair_ok = flipped == gated.variant
        && ungated.data_fingerprint == gated.data_fingerprint
        && ungated.fingerprint != gated.fingerprint;
    let finite = [ungated, gated]
        .iter()
        .all(|r| !r.final_losses.is_empty() && r.final_losses.values().all(|l| l.is_finite()));
    let pass = rows_ok && deltas_ok && pair_ok && finite && text.contains("wrote");
    report(
        7,
        "ablation grid",
        pass,
        &format!("7 rows {rows_ok}, deltas {deltas_ok}, gating-only pair {pair_ok}, finite losses {finite}"),
    );
}

#[test]
fn criterion_8_schedule() {
    let _g = serial();
    let s = StageConfig::default_for(Stage::Instruct).schedule();
    let start = s.lr_at(0);
    let peak = s.lr_at(1000);
    let end = s.lr_at(s.max_steps);
    let ft = StageConfig::default_for(Stage::Finetune).schedule();
    let ft_peak = (0..=ft.max_steps).map(|i| ft.lr_at(i)).fold(0.0, f64::max);
    let pass = start == 1e-8 && peak == 1e-5 && end == 0.0 && ft_peak == 1e-4;
    let toy_peak = RunConfig::toy().stages.finetune.lr_peak;
    report(
        8,
        "schedule",
        pass,
        &format!("step 0 {start:e}, step 1000 {peak:e}, final {end:e}, finetune preset peak {ft_peak:e}, toy run finetune peak {toy_peak:e}"),
    );
}

#[test]
fn criterion_9_determinism_and_resume() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let mut run = reduced_run(8);
    run.stages.pretrain.checkpoint_every = 3;
    let config = write_config(dir.path(), &run);
    let train = |out: &Path, stage: &str, ckpt: Option<&Path>| {
        let mut args = vec!["--config", &config, "--out", out.to_str().unwrap()];
        if let Some(c) = ckpt {
            args.extend(["--checkpoint", c.to_str().unwrap()]);
        }
        args.extend(["train", "--stage", stage]);
        stdout_of(&crome(&args), stage);
    };
    let read = |p: &Path| std::fs::read(p).unwrap();

    // two identical runs of every stage
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut identical = Vec::new();
    for stage in ["lm-pretrain", "pretrain", "instruct", "finetune"] {
        for out in [&a, &b] {
            train(out, stage, None);
        }
        let log = format!("{stage}.metrics.jsonl");
        identical.push(read(&a.join(&log)) == read(&b.join(&log)));
    }
    let logs_ok = identical.iter().all(|x| *x);

    // resume pretrain from each intermediate checkpoint in a fresh directory
    let full_log = read(&a.join("pretrain.metrics.jsonl"));
    let full_ckpt = read(&a.join("pretrain.ckpt"));
    let mut resumed = Vec::new();
    for step in [3usize, 6] {
        let c = dir.path().join(format!("resume{step}"));
        std::fs::create_dir_all(&c).unwrap();
        let head: String = String::from_utf8_lossy(&full_log).lines().take(step).map(|l| format!("{l}\n")).collect();
        std::fs::write(c.join("pretrain.metrics.jsonl"), head).unwrap();
        train(&c, "pretrain", Some(&a.join(format!("pretrain.step{step}.ckpt"))));
        resumed.push(read(&c.join("pretrain.metrics.jsonl")) == full_log && read(&c.join("pretrain.ckpt")) == full_ckpt);
    }
    let resume_ok = resumed.iter().all(|x| *x);
    report(
        9,
        "determinism and resume",
        logs_ok && resume_ok,
        &format!("identical logs per stage {identical:?}, resume at steps 3 and 6 {resumed:?}"),
    );
}
