use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use crome_core::adapter::accounting::{format_millions, full_scale_accounting_report};
use crome_core::data::io::{write_samples, DatasetManifest, ManifestEntry};
use crome_core::data::sampler::{balanced_probabilities, exact_probabilities};
use crome_core::data::tasks::{generate_dataset, TaskKind};
use crome_core::eval::scorer::{scorers, ScoringContext};
use crome_core::eval::{ablation_grid, bottleneck_sweep, evaluate_mc, fingerprint, run_ablation_grid};
use crome_core::model::Model;
use crome_core::params::derive_seed;
use crome_core::pipeline::run_stage;
use crome_core::run::RunConfig;
use crome_core::train::{run_trainer, Checkpoint, Stage, TrainOptions, Trainer};
use crome_core::verify::run_grad_checks;
use crome_core::CromeError;

use crate::exit::CliError;
use crate::lock::OutputLock;
use crate::{Cli, Command};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let run = load_run(cli)?;
    if cli.dry_run {
        print_dry_run(&run)?;
        if let Command::GenData { kinds, sizes } = &cli.command {
            gen_data(&run, kinds, sizes, true)?;
        }
        return Ok(());
    }
    match &cli.command {
        Command::GenData { kinds, sizes } => {
            let _lock = OutputLock::acquire(&run.out_dir)?;
            gen_data(&run, kinds, sizes, false)
        }
        Command::Train { stage } => {
            let _lock = OutputLock::acquire(&run.out_dir)?;
            train(&run, *stage, cli.checkpoint.as_deref())
        }
        Command::Eval { task, scorer } => {
            let _lock = OutputLock::acquire(&run.out_dir)?;
            eval(&run, *task, scorer, cli.checkpoint.as_deref())
        }
        Command::Ablate => {
            let _lock = OutputLock::acquire(&run.out_dir)?;
            ablate(&run, cli.checkpoint.as_deref())
        }
        Command::SweepM { widths } => {
            let _lock = OutputLock::acquire(&run.out_dir)?;
            sweep(&run, widths, cli.checkpoint.as_deref())
        }
        Command::GradCheck => grad_check(&run),
        Command::ReportParams { dim_a, dim_b, bottleneck, proj_in } => report_params(&run, *dim_a, *dim_b, *bottleneck, proj_in),
    }
}

fn load_run(cli: &Cli) -> Result<RunConfig> {
    let mut run = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CromeError::io(p, e))?;
            RunConfig::from_toml(&text).with_context(|| format!("loading {}", p.display()))?
        }
        None => RunConfig::toy(),
    };
    if let Some(seed) = cli.seed {
        run.seed = seed;
        for st in Stage::ALL {
            run.stages.get_mut(st).seed = seed;
        }
    }
    if let Some(out) = &cli.out {
        run.out_dir = out.clone();
    } else if let Some(out) = std::env::var_os("CROME_OUT").filter(|v| !v.is_empty()) {
        run.out_dir = PathBuf::from(out);
    }
    run.validate()?;
    Ok(run)
}

fn print_dry_run(run: &RunConfig) -> Result<()> {
    let model = Model::init(run.model.clone(), run.seed)?;
    let total = model.store.numel_where(|_| true);
    println!("config fingerprint {}", run.fingerprint());
    println!("output directory {}", run.out_dir.display());
    println!("model parameters {total}");
    for st in Stage::ALL {
        let cfg = run.stages.get(st);
        let mask = cfg.freeze_mask();
        let n = model.store.numel_where(|k| mask.is_trainable(k));
        println!(
            "{:<12} trainable {:>9} of {total}  mask [{}]  steps {} batch {} lr_peak {:e}",
            st.name(),
            n,
            mask.prefixes().join(", "),
            cfg.max_steps,
            cfg.batch_size,
            cfg.lr_peak
        );
    }
    Ok(())
}

fn gen_data(run: &RunConfig, kinds: &[TaskKind], sizes: &[u64], dry_run: bool) -> Result<()> {
    if kinds.len() != sizes.len() {
        bail!(CliError::Usage(format!("{} --kind values but {} --n values", kinds.len(), sizes.len())));
    }
    let mut entries = Vec::new();
    for (i, (kind, &n)) in kinds.iter().zip(sizes).enumerate() {
        let dup = kinds[..i].iter().filter(|k| *k == kind).count();
        let name = if dup == 0 { kind.name().to_string() } else { format!("{}-{}", kind.name(), dup + 1) };
        entries.push(ManifestEntry { name: name.clone(), size: n as usize, kind: *kind, path: format!("{name}.jsonl").into() });
    }
    let manifest = DatasetManifest::new(entries)?;
    let probs = balanced_probabilities(&manifest.sizes())?;
    let exact = exact_probabilities(&manifest.sizes());
    println!("{:<16} {:<14} {:>8} {:>12}", "dataset", "kind", "size", "probability");
    for (i, e) in manifest.entries.iter().enumerate() {
        let frac = exact.as_ref().map_or(String::new(), |x| format!("  ({}/{})", x[i].0, x[i].1));
        println!("{:<16} {:<14} {:>8} {:>12.6}{frac}", e.name, e.kind.name(), e.size, probs[i]);
    }
    if dry_run {
        return Ok(());
    }
    for e in &manifest.entries {
        let seed = derive_seed(run.seed, &format!("gen/{}", e.name));
        let ds = generate_dataset(e.kind, e.size, seed, run.data.image_size)?;
        write_samples(&run.out_dir.join(&e.path), &ds.samples)?;
    }
    let path = run.out_dir.join("manifest.jsonl");
    manifest.write(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn stage_ckpt(run: &RunConfig, stage: Stage) -> PathBuf {
    run.out_dir.join(format!("{}.ckpt", stage.name()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Model for `stage`: a fresh one for the LM stage, otherwise the
/// prerequisite (or `--checkpoint`) weights.
fn starting_point(run: &RunConfig, stage: Stage, explicit: Option<&Path>) -> Result<(Model, Option<Checkpoint>)> {
    let mut model = Model::init(run.model.clone(), run.seed)?;
    let path = match (explicit, stage.prerequisite()) {
        (Some(p), _) => p.to_path_buf(),
        (None, None) => return Ok((model, None)),
        (None, Some(req)) => {
            let p = stage_ckpt(run, req);
            if !p.exists() {
                return Err(CromeError::MissingPrerequisite { stage: stage.to_string(), required: req.to_string() }.into());
            }
            p
        }
    };
    let ckpt = load_ckpt(&path)?;
    let from: Stage = ckpt.meta.stage.parse()?;
    if from == stage {
        // resumed by the caller
        return Ok((model, Some(ckpt)));
    }
    if Stage::ALL.iter().position(|s| *s == from) > Stage::ALL.iter().position(|s| *s == stage) {
        return Err(CromeError::Config(format!("cannot start stage {stage} from a later {from} checkpoint")).into());
    }
    if ckpt.meta.config_fingerprint != run.fingerprint() {
        println!("note: {} was written under a different configuration", path.display());
    }
    ckpt.apply_to(&mut model.store, None)?;
    Ok((model, None))
}

fn train(run: &RunConfig, stage: Stage, explicit: Option<&Path>) -> Result<()> {
    let (mut model, resume) = starting_point(run, stage, explicit)?;
    let cfg = run.stages.get(stage).clone();
    let data = run.stage_data(stage, 1)?;
    let mut trainer = match &resume {
        Some(ck) => Trainer::resume(&mut model, cfg.clone(), &data, run.preprocess.clone(), ck)?,
        None => Trainer::new(&mut model, cfg.clone(), &data, run.preprocess.clone())?,
    };
    let metrics_path = run.out_dir.join(format!("{}.metrics.jsonl", stage.name()));
    if resume.is_none() && metrics_path.exists() {
        fs::remove_file(&metrics_path).map_err(|e| CromeError::io(&metrics_path, e))?;
    }
    println!(
        "stage {stage}: {} trainable parameters ({}), mask [{}], steps {}..{}",
        trainer.trainable_count(),
        format_millions(trainer.trainable_count() as i64),
        trainer.mask().prefixes().join(", "),
        trainer.step(),
        cfg.max_steps
    );
    let opts = TrainOptions {
        metrics_path: Some(metrics_path.clone()),
        checkpoint_dir: Some(run.out_dir.clone()),
        deterministic_log: true,
        config_fingerprint: run.fingerprint(),
    };
    let started = Instant::now();
    let out = run_trainer(&mut trainer, &cfg, &opts)?;
    let path = stage_ckpt(run, stage);
    out.checkpoint.save(&path)?;
    if let Some(last) = out.metrics.last() {
        println!("final {}", serde_json::to_string(last)?);
    }
    println!("wrote {} and {}", path.display(), metrics_path.display());
    eprintln!("{stage} took {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn eval(run: &RunConfig, task: TaskKind, scorer: &str, explicit: Option<&Path>) -> Result<()> {
    if !task.is_multiple_choice() {
        return Err(CromeError::Config(format!("task {task} is not multiple-choice")).into());
    }
    let scorer = scorers().get(scorer)?;
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => [Stage::Finetune, Stage::Instruct]
            .into_iter()
            .map(|s| stage_ckpt(run, s))
            .find(|p| p.exists())
            .ok_or_else(|| CromeError::MissingPrerequisite { stage: "eval".into(), required: Stage::Instruct.to_string() })?,
    };
    let ckpt = load_ckpt(&path)?;
    let mut model = Model::init(run.model.clone(), run.seed)?;
    ckpt.apply_to(&mut model.store, None)?;
    let samples = if run.data.finetune[0].kind == task {
        run.eval_data()?
    } else {
        let seed = derive_seed(run.seed, &format!("eval/{task}"));
        generate_dataset(task, run.data.eval_size, seed, run.data.image_size)?.samples
    };
    let fp = fingerprint(&[("run", &run.fingerprint()), ("checkpoint", &ckpt.meta.stage), ("task", task.name())]);
    let ctx = ScoringContext { model: &model, preprocess: &run.preprocess, seed: run.seed };
    let report = evaluate_mc(&ctx, &samples, scorer, &fp)?;
    let out = run.out_dir.join(format!("eval.{task}.{}.jsonl", scorer.name()));
    fs::write(&out, report.to_jsonl()).map_err(|e| CromeError::io(&out, e))?;
    println!("{}", report.summary());
    println!("accuracy {:.4}", report.accuracy.value());
    println!("wrote {}", out.display());
    Ok(())
}

/// LM-pretrained base shared by every ablation row and sweep point.
fn lm_base(run: &RunConfig, explicit: Option<&Path>) -> Result<Model> {
    let mut model = Model::init(run.model.clone(), run.seed)?;
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| stage_ckpt(run, Stage::LmPretrain));
    if path.exists() {
        println!("using LM weights from {}", path.display());
        load_ckpt(&path)?.apply_to(&mut model.store, Some(&["lm."]))?;
        return Ok(model);
    }
    if explicit.is_some() {
        return Err(CromeError::io(&path, std::io::ErrorKind::NotFound.into()).into());
    }
    println!("training the language model first");
    let out = run_stage(run, &mut model, Stage::LmPretrain, 1, None, &TrainOptions::default())?;
    out.checkpoint.save(&path)?;
    Ok(model)
}

fn ablate(run: &RunConfig, explicit: Option<&Path>) -> Result<()> {
    let base = lm_base(run, explicit)?;
    let grid = ablation_grid();
    let table = run_ablation_grid(run, &grid, &base, &TrainOptions::default(), &mut |row| {
        let status = if row.ok { "ok".to_string() } else { format!("FAILED: {}", row.error.as_deref().unwrap_or("")) };
        println!("row {} {}: {status}", row.variant.row, row.variant.label);
    });
    let tsv = run.out_dir.join("ablation.tsv");
    fs::write(&tsv, table.to_tsv()).map_err(|e| CromeError::io(&tsv, e))?;
    let json = run.out_dir.join("ablation.json");
    fs::write(&json, serde_json::to_string_pretty(&table)?).map_err(|e| CromeError::io(&json, e))?;
    print!("{}", table.summary());
    println!("wrote {} and {}", tsv.display(), json.display());
    let failed: Vec<String> = table.rows.iter().filter(|r| !r.ok).map(|r| r.variant.label.clone()).collect();
    if !failed.is_empty() {
        bail!(CliError::Failed(format!("ablation rows failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn sweep(run: &RunConfig, widths: &[usize], explicit: Option<&Path>) -> Result<()> {
    let widths = if widths.is_empty() { run.sweep_m.clone() } else { widths.to_vec() };
    if widths.contains(&0) {
        bail!(CliError::Usage("bottleneck widths must be positive".into()));
    }
    let base = lm_base(run, explicit)?;
    let mut tsv = String::from("bottleneck\tadapter_params\tzero_shot\tfinetuned\tfingerprint\n");
    let rows = bottleneck_sweep(run, &widths, &base, &TrainOptions::default(), &mut |r| {
        println!(
            "m={:<4} params {:>7}  zero-shot {:.4}  finetuned {:.4}",
            r.bottleneck,
            r.adapter_params,
            r.zero_shot.value(),
            r.finetuned.value()
        );
    })?;
    for r in &rows {
        tsv.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{}\n",
            r.bottleneck,
            r.adapter_params,
            r.zero_shot.value(),
            r.finetuned.value(),
            r.fingerprint
        ));
    }
    let path = run.out_dir.join("sweep-m.tsv");
    fs::write(&path, tsv).map_err(|e| CromeError::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn grad_check(run: &RunConfig) -> Result<()> {
    let cfg = &run.grad_check;
    let started = Instant::now();
    let entries = run_grad_checks(cfg, run.seed)?;
    let mut worst: f64 = 0.0;
    for e in &entries {
        worst = worst.max(e.max_rel_error);
        let status = if e.passed(cfg.tolerance) { "ok" } else { "FAIL" };
        println!("{:<28} {:>6} elements  max rel error {:.3e}  {status}", e.name, e.checked, e.max_rel_error);
    }
    println!(
        "max relative error {worst:.3e} over {} checks (tolerance {:e}, eps {:e}) in {:.1}s",
        entries.len(),
        cfg.tolerance,
        cfg.eps,
        started.elapsed().as_secs_f64()
    );
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed(cfg.tolerance)).map(|e| e.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CromeError::Verification(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}

fn report_params(run: &RunConfig, dim_a: usize, dim_b: usize, m: usize, proj_in: &[usize]) -> Result<()> {
    let report = full_scale_accounting_report(dim_a, dim_b, m, proj_in)?;
    print!("{report}");
    let model = Model::init(run.model.clone(), run.seed)?;
    println!("toy configuration:");
    for prefix in ["vision.", "lm.", "qformer.", "proj.", "adapter."] {
        println!("  {:<10} {:>8}", prefix.trim_end_matches('.'), model.store.numel_where(|k| k.starts_with(prefix)));
    }
    if report.delta != report.delta_closed_form {
        return Err(CromeError::Verification("enumerated delta disagrees with the closed form".into()).into());
    }
    if let Some(r) = &report.reference {
        if !r.delta_matches || !r.adapter_matches {
            return Err(CromeError::Verification("accounting does not match the reference totals".into()).into());
        }
    }
    Ok(())
}
