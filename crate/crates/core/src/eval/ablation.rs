use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{fingerprint, Accuracy, EvalReport};
use crate::adapter::accounting::count_adapter_params;
use crate::error::{CromeError, Result};
use crate::model::Model;
use crate::pipeline::{evaluate_heldout, run_stage};
use crate::run::RunConfig;
use crate::train::{Stage, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneStrategy {
    /// Zero-shot only.
    None,
    /// Adapter-only fine-tuning on the held-out task.
    Adapter,
    /// Fine-tunes the Q-Former and projections, for adapter-free models.
    QformerProj,
}

impl FinetuneStrategy {
    fn trainable(self) -> Option<Vec<String>> {
        match self {
            FinetuneStrategy::QformerProj => Some(vec!["qformer.".into(), "proj.".into()]),
            _ => None,
        }
    }
}

/// One row of the ablation grid, described by its axes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub row: usize,
    pub label: String,
    pub adapter: bool,
    pub gated: bool,
    pub pretrain: bool,
    pub extra_instruct_data: bool,
    pub finetune: FinetuneStrategy,
}

impl AblationVariant {
    pub fn adapter_kind(&self) -> &'static str {
        match (self.adapter, self.gated) {
            (false, _) => "none",
            (true, false) => "ungated",
            (true, true) => "gated",
        }
    }

    fn axes(&self) -> String {
        format!(
            "adapter={} gated={} pretrain={} extra_it={} finetune={:?}",
            self.adapter, self.gated, self.pretrain, self.extra_instruct_data, self.finetune
        )
    }
}

/// The seven-row grid: baseline, ungated, gated, no pretraining, extra
/// instruction data, baseline fine-tuned, full.
pub fn ablation_grid() -> Vec<AblationVariant> {
    let v = |row, label: &str, adapter, gated, pretrain, extra, finetune| AblationVariant {
        row,
        label: label.into(),
        adapter,
        gated,
        pretrain,
        extra_instruct_data: extra,
        finetune,
    };
    use FinetuneStrategy::*;
    vec![
        v(1, "no-adapter", false, false, true, false, None),
        v(2, "ungated", true, false, true, false, None),
        v(3, "gated", true, true, true, false, None),
        v(4, "gated-no-pretrain", true, true, false, false, None),
        v(5, "gated-extra-it", true, true, true, true, None),
        v(6, "no-adapter-finetune", false, false, true, false, QformerProj),
        v(7, "full", true, true, true, true, Adapter),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub ok: bool,
    pub error: Option<String>,
    pub zero_shot: Option<Accuracy>,
    pub finetuned: Option<Accuracy>,
    /// Fine-tuned accuracy when the row fine-tunes, zero-shot otherwise.
    pub headline: Option<Accuracy>,
    pub delta_vs_row1: Option<f64>,
    pub final_losses: BTreeMap<String, f64>,
    pub data_fingerprint: String,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn fmt_acc(a: &Option<Accuracy>) -> String {
    a.map_or("-".into(), |a| format!("{:.4}", a.value()))
}

impl AblationTable {
    /// Tab-separated rows for diffing.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "row\tlabel\tadapter\tgated\tpretrain\textra_it\tfinetune\tzero_shot\tfinetuned\theadline\tdelta_vs_row1\tstatus\tfingerprint\n",
        );
        for r in &self.rows {
            let v = &r.variant;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{:?}\t{}\t{}\t{}\t{}\t{}\t{}",
                v.row,
                v.label,
                v.adapter,
                v.gated,
                v.pretrain,
                v.extra_instruct_data,
                v.finetune,
                fmt_acc(&r.zero_shot),
                fmt_acc(&r.finetuned),
                fmt_acc(&r.headline),
                r.delta_vs_row1.map_or("-".into(), |d| format!("{d:+.4}")),
                if r.ok { "ok".to_string() } else { format!("failed: {}", r.error.as_deref().unwrap_or("")) },
                r.fingerprint,
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "{:<3} {:<20} {:<8} {:<6} {:<8} {:<8} {:<12} {:>9} {:>9} {:>8}\n",
            "#", "variant", "adapter", "gated", "pretrain", "extra_it", "finetune", "zero-shot", "finetuned", "delta"
        );
        for r in &self.rows {
            let v = &r.variant;
            let mark = |b: bool| if b { "x" } else { "" };
            let _ = writeln!(
                out,
                "{:<3} {:<20} {:<8} {:<6} {:<8} {:<8} {:<12} {:>9} {:>9} {:>8}{}",
                v.row,
                v.label,
                mark(v.adapter),
                mark(v.gated),
                mark(v.pretrain),
                mark(v.extra_instruct_data),
                format!("{:?}", v.finetune).to_lowercase(),
                fmt_acc(&r.zero_shot),
                fmt_acc(&r.finetuned),
                r.delta_vs_row1.map_or("-".into(), |d| format!("{d:+.4}")),
                if r.ok { String::new() } else { "  FAILED".into() },
            );
        }
        out
    }
}

/// Fingerprint of everything that determines the training data.
pub fn data_fingerprint(run: &RunConfig) -> String {
    let data = toml::to_string(&run.data).expect("data config serializes");
    fingerprint(&[("seed", &run.seed.to_string()), ("data", &data)])
}

fn run_variant(run: &RunConfig, base: &Model, v: &AblationVariant, fp: &str, opts: &TrainOptions) -> Result<AblationRow> {
    let mut model = base.with_adapter(v.adapter_kind(), run.model.adapter.bottleneck, run.seed)?;
    let mut losses = BTreeMap::new();
    let mut last_loss = |stage: Stage, out: &crate::train::StageOutcome| -> Result<()> {
        let l = out.metrics.last().map_or(f64::NAN, |m| m.loss);
        if !l.is_finite() {
            return Err(CromeError::NonFiniteLoss { stage: stage.to_string(), step: out.metrics.len(), value: l });
        }
        losses.insert(stage.to_string(), l);
        Ok(())
    };
    if v.pretrain {
        let out = run_stage(run, &mut model, Stage::Pretrain, 1, None, opts)?;
        last_loss(Stage::Pretrain, &out)?;
    }
    let scale = if v.extra_instruct_data { run.data.extra_instruct_factor } else { 1 };
    let out = run_stage(run, &mut model, Stage::Instruct, scale, None, opts)?;
    last_loss(Stage::Instruct, &out)?;
    let zero = evaluate_heldout(run, &model, "likelihood", fp)?;
    let mut finetuned = None;
    if v.finetune != FinetuneStrategy::None {
        let out = run_stage(run, &mut model, Stage::Finetune, 1, v.finetune.trainable(), opts)?;
        last_loss(Stage::Finetune, &out)?;
        finetuned = Some(evaluate_heldout(run, &model, "likelihood", fp)?.accuracy);
    }
    let headline = finetuned.or(Some(zero.accuracy));
    Ok(AblationRow {
        variant: v.clone(),
        ok: true,
        error: None,
        zero_shot: Some(zero.accuracy),
        finetuned,
        headline,
        delta_vs_row1: None,
        final_losses: losses,
        data_fingerprint: String::new(),
        fingerprint: fp.to_string(),
    })
}

/// Trains and evaluates every variant from the same LM-pretrained `base`.
/// A failing variant is recorded as such and the grid continues.
pub fn run_ablation_grid(
    run: &RunConfig,
    grid: &[AblationVariant],
    base: &Model,
    opts: &TrainOptions,
    progress: &mut dyn FnMut(&AblationRow),
) -> AblationTable {
    let data_fp = data_fingerprint(run);
    let run_fp = run.fingerprint();
    let mut rows = Vec::with_capacity(grid.len());
    for v in grid {
        let fp = fingerprint(&[("run", &run_fp), ("data", &data_fp), ("axes", &v.axes())]);
        let mut row = run_variant(run, base, v, &fp, opts).unwrap_or_else(|e| AblationRow {
            variant: v.clone(),
            ok: false,
            error: Some(e.to_string()),
            zero_shot: None,
            finetuned: None,
            headline: None,
            delta_vs_row1: None,
            final_losses: BTreeMap::new(),
            data_fingerprint: String::new(),
            fingerprint: fp.clone(),
        });
        row.data_fingerprint = data_fp.clone();
        progress(&row);
        rows.push(row);
    }
    let base_acc = rows.first().and_then(|r| r.headline).map(|a| a.value());
    for r in &mut rows {
        r.delta_vs_row1 = match (base_acc, r.headline) {
            (Some(b), Some(a)) => Some(a.value() - b),
            _ => None,
        };
    }
    AblationTable { rows }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bottleneck: usize,
    pub adapter_params: usize,
    pub zero_shot: Accuracy,
    pub finetuned: Accuracy,
    pub fingerprint: String,
}

/// Full pipeline (pretrain, instruct, adapter fine-tune) per bottleneck
/// width; everything else, seeds included, is shared.
pub fn bottleneck_sweep(
    run: &RunConfig,
    m_values: &[usize],
    base: &Model,
    opts: &TrainOptions,
    progress: &mut dyn FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if m_values.is_empty() {
        return Err(CromeError::Config("bottleneck sweep needs at least one width".into()));
    }
    let run_fp = run.fingerprint();
    let mut rows = Vec::new();
    for &m in m_values {
        let fp = fingerprint(&[("run", &run_fp), ("bottleneck", &m.to_string())]);
        let mut model = base.with_adapter("gated", m, run.seed)?;
        run_stage(run, &mut model, Stage::Pretrain, 1, None, opts)?;
        run_stage(run, &mut model, Stage::Instruct, 1, None, opts)?;
        let zero = evaluate_heldout(run, &model, "likelihood", &fp)?.accuracy;
        run_stage(run, &mut model, Stage::Finetune, 1, None, opts)?;
        let finetuned = evaluate_heldout(run, &model, "likelihood", &fp)?.accuracy;
        let row = SweepRow {
            bottleneck: m,
            adapter_params: count_adapter_params(run.model.d_llm(), m, true)?,
            zero_shot: zero,
            finetuned,
            fingerprint: fp,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub zero_shot: EvalReport,
    pub finetuned: Option<EvalReport>,
    pub delta: Option<f64>,
    /// Parameters trained by the fine-tuning stage.
    pub trainable_params: usize,
}

/// Evaluates an instruction-tuned model on the held-out task, then (unless
/// `finetune` is false) fine-tunes only the adapter and evaluates again.
/// `model` is left in its fine-tuned state.
pub fn zero_vs_finetune_report(
    run: &RunConfig,
    model: &mut Model,
    finetune: bool,
    opts: &TrainOptions,
) -> Result<PairedReport> {
    // building the instruction data runs the leakage check
    run.stage_data(Stage::Instruct, 1)?;
    let mask = run.stages.finetune.freeze_mask();
    let trainable_params = model.store.numel_where(|n| mask.is_trainable(n));
    let expected = count_adapter_params(model.cfg.d_llm(), model.cfg.adapter.bottleneck, model.cfg.adapter.kind == "gated")?;
    if run.stages.finetune.trainable.is_none() && trainable_params != expected {
        return Err(CromeError::Verification(format!(
            "fine-tuning would train {trainable_params} parameters, adapter has {expected}"
        )));
    }
    let fp = run.fingerprint();
    let zero_shot = evaluate_heldout(run, model, "likelihood", &fp)?;
    if !finetune {
        return Ok(PairedReport { zero_shot, finetuned: None, delta: None, trainable_params });
    }
    run_stage(run, model, Stage::Finetune, 1, None, opts)?;
    let after = evaluate_heldout(run, model, "likelihood", &fp)?;
    let delta = after.accuracy.value() - zero_shot.accuracy.value();
    Ok(PairedReport { zero_shot, finetuned: Some(after), delta: Some(delta), trainable_params })
}
