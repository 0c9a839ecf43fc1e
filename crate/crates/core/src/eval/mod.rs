//! Multiple-choice evaluation, the ablation grid and the bottleneck sweep.

pub mod ablation;
pub mod scorer;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Sample;
use crate::error::{CromeError, Result};
use scorer::{choices_of, ChoiceScorer, ScoringContext};

pub use ablation::{
    ablation_grid, bottleneck_sweep, run_ablation_grid, zero_vs_finetune_report, AblationRow, AblationTable,
    AblationVariant, FinetuneStrategy, PairedReport, SweepRow,
};
pub use scorer::{scorers, LikelihoodScorer, OracleScorer, UniformRandomScorer};

/// `correct / total`, kept as integers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub numerator: usize,
    pub denominator: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

impl std::fmt::Display for Accuracy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{} ({:.1}%)", self.numerator, self.denominator, 100.0 * self.value())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub index: usize,
    pub predicted: usize,
    pub gold: usize,
    pub predicted_text: String,
    pub gold_text: String,
    pub correct: bool,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub scorer: String,
    pub n_samples: usize,
    pub accuracy: Accuracy,
    pub fingerprint: String,
    pub records: Vec<PredictionRecord>,
}

impl EvalReport {
    /// One JSON line per prediction followed by a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "task": self.task,
            "scorer": self.scorer,
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "fingerprint": self.fingerprint,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<14} {:<15} n={:<6} accuracy {}  [{}]",
            self.task,
            self.scorer,
            self.n_samples,
            self.accuracy,
            &self.fingerprint[..12.min(self.fingerprint.len())]
        )
    }
}

/// Hash of labelled parts, used to tag reports with the configuration that
/// produced them.
pub fn fingerprint(parts: &[(&str, &str)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in parts {
        h.update((k.len() as u64).to_le_bytes());
        h.update(k.as_bytes());
        h.update((v.len() as u64).to_le_bytes());
        h.update(v.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Index of the best score; ties go to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate_mc(
    ctx: &ScoringContext,
    samples: &[Sample],
    scorer: &dyn ChoiceScorer,
    fingerprint: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(CromeError::Contract("evaluation set is empty".into()));
    }
    let mut records = Vec::with_capacity(samples.len());
    for (index, sample) in samples.iter().enumerate() {
        let choices = choices_of(sample)?;
        let gold_text = sample.gold_text()?;
        let golds: Vec<usize> = (0..choices.len()).filter(|&i| choices[i] == gold_text).collect();
        let [gold] = golds[..] else {
            return Err(CromeError::Contract(format!(
                "sample {index}: {} choices match the answer {gold_text:?}",
                golds.len()
            )));
        };
        let scores = scorer.scores(ctx, sample, index)?;
        if scores.len() != choices.len() || scores.iter().any(|s| s.is_nan()) {
            return Err(CromeError::Verification(format!("sample {index}: scorer returned invalid scores")));
        }
        let predicted = argmax_lowest(&scores);
        records.push(PredictionRecord {
            index,
            predicted,
            gold,
            predicted_text: choices[predicted].clone(),
            gold_text,
            correct: predicted == gold,
            scores,
        });
    }
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(EvalReport {
        task: samples[0].tag.clone(),
        scorer: scorer.name().to_string(),
        n_samples: samples.len(),
        accuracy: Accuracy { numerator: correct, denominator: samples.len() },
        fingerprint: fingerprint.to_string(),
        records,
    })
}
