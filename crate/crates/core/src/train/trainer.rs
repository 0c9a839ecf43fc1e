use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::time::Instant;

use crome_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, RngState};
use super::optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimizerState};
use super::schedule::LrSchedule;
use super::stage::{build_freeze_mask, FreezeMask, Stage};
use crate::data::preprocess::{preprocess, Mode, PreprocessSpec};
use crate::data::sampler::BalancedSampler;
use crate::data::tasks::TextRecord;
use crate::data::Sample;
use crate::error::{CromeError, Result};
use crate::model::Model;
use crate::params::derive_seed;
use crate::session::Session;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub min_lr: f64,
    pub optimizer: AdamWConfig,
    /// Global-norm gradient clipping threshold; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many steps (0: never).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Replaces the stage's default trainable prefixes.
    #[serde(default)]
    pub trainable: Option<Vec<String>>,
}

impl StageConfig {
    pub fn default_for(stage: Stage) -> Self {
        let (max_steps, batch_size, lr_peak) = match stage {
            Stage::LmPretrain => (3000, 16, 1e-3),
            Stage::Pretrain => (2000, 32, 1e-5),
            Stage::Instruct => (10_000, 16, 1e-5),
            Stage::Finetune => (2000, 16, 1e-4),
        };
        Self {
            stage,
            max_steps,
            batch_size,
            lr_start: 1e-8,
            lr_peak,
            warmup_steps: 1000.min(max_steps),
            min_lr: 0.0,
            optimizer: AdamWConfig::default(),
            grad_clip: Some(1.0),
            seed: 0,
            checkpoint_every: 0,
            trainable: None,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr_start: self.lr_start,
            lr_peak: self.lr_peak,
            warmup_steps: self.warmup_steps,
            min_lr: self.min_lr,
            max_steps: self.max_steps,
        }
    }

    pub fn freeze_mask(&self) -> FreezeMask {
        match &self.trainable {
            Some(p) => FreezeMask::custom(&p.iter().map(String::as_str).collect::<Vec<_>>()),
            None => build_freeze_mask(self.stage),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CromeError::Config(format!("{}: batch_size must be positive", self.stage)));
        }
        self.schedule().validate()?;
        self.freeze_mask().validate_for(self.stage)
    }
}

/// Training records for one stage: a text corpus for the LM stage, or one
/// or more sample datasets mixed by the balanced sampler.
#[derive(Clone, Debug)]
pub enum StageData {
    Text(Vec<TextRecord>),
    Multimodal(Vec<Vec<Sample>>),
}

impl StageData {
    pub fn lens(&self) -> Vec<usize> {
        match self {
            StageData::Text(r) => vec![r.len()],
            StageData::Multimodal(ds) => ds.iter().map(Vec::len).collect(),
        }
    }

    fn check_for(&self, stage: Stage) -> Result<()> {
        match (stage.is_multimodal(), self) {
            (false, StageData::Text(_)) | (true, StageData::Multimodal(_)) => {}
            _ => return Err(CromeError::Data(format!("wrong kind of training data for stage {stage}"))),
        }
        if self.lens().iter().any(|&n| n == 0) || self.lens().is_empty() {
            return Err(CromeError::Data(format!("stage {stage} has an empty dataset")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: String,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Per-sample inputs that do not depend on trainable parameters.
#[derive(Default)]
struct Caches {
    features: HashMap<(usize, usize), Tensor>,
    qformer: HashMap<(usize, usize), Tensor>,
}

pub struct Trainer<'a> {
    model: &'a mut Model,
    cfg: StageConfig,
    data: &'a StageData,
    preprocess: PreprocessSpec,
    mask: FreezeMask,
    opt: OptimizerState,
    sampler: BalancedSampler,
    step: usize,
    caches: Caches,
    started: Instant,
    pub record_wall_clock: bool,
    pub config_fingerprint: String,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut Model, cfg: StageConfig, data: &'a StageData, preprocess: PreprocessSpec) -> Result<Self> {
        cfg.validate()?;
        data.check_for(cfg.stage)?;
        let mask = cfg.freeze_mask();
        let trainable: Vec<String> = model.store.names().filter(|n| mask.is_trainable(n)).map(String::from).collect();
        if trainable.is_empty() {
            return Err(CromeError::Config(format!("stage {} has no trainable parameters", cfg.stage)));
        }
        let opt = OptimizerState::new(&model.store, trainable.iter().map(String::as_str))?;
        let sampler = BalancedSampler::new(&data.lens(), derive_seed(cfg.seed, &format!("sampler/{}", cfg.stage)))?;
        Ok(Self {
            model,
            cfg,
            data,
            preprocess,
            mask,
            opt,
            sampler,
            step: 0,
            caches: Caches::default(),
            started: Instant::now(),
            record_wall_clock: true,
            config_fingerprint: String::new(),
        })
    }

    /// Continues from a checkpoint written by this stage: parameters,
    /// optimizer moments, step counter and sampler stream are restored.
    pub fn resume(
        model: &'a mut Model,
        cfg: StageConfig,
        data: &'a StageData,
        preprocess: PreprocessSpec,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        if ckpt.meta.stage != cfg.stage.name() {
            return Err(CromeError::Contract(format!(
                "cannot resume stage {} from a {} checkpoint",
                cfg.stage, ckpt.meta.stage
            )));
        }
        let rng = ckpt
            .meta
            .rng
            .as_ref()
            .ok_or_else(|| CromeError::Contract("checkpoint has no sampler state".into()))?
            .restore()?;
        let opt = ckpt
            .optimizer_state()
            .ok_or_else(|| CromeError::Contract("checkpoint has no optimizer state".into()))?;
        ckpt.apply_to(&mut model.store, None)?;
        let mut t = Self::new(model, cfg, data, preprocess)?;
        if opt.names().ne(t.opt.names()) {
            return Err(CromeError::Contract("checkpoint optimizer state covers different parameters".into()));
        }
        t.opt = opt;
        t.step = ckpt.meta.step as usize;
        t.sampler = BalancedSampler::with_rng(&data.lens(), rng)?;
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn mask(&self) -> &FreezeMask {
        &self.mask
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn trainable_count(&self) -> usize {
        self.model.store.numel_where(|n| self.mask.is_trainable(n))
    }

    fn draw_batch(&mut self) -> Vec<(usize, usize)> {
        let lens = self.data.lens();
        (0..self.cfg.batch_size).map(|_| self.sampler.next_item(&lens)).collect()
    }

    fn features(&mut self, d: usize, i: usize, slot: usize) -> Result<Tensor> {
        let StageData::Multimodal(ds) = self.data else { unreachable!("text stages have no images") };
        let augment = self.preprocess.random_crop || self.preprocess.hflip;
        if !augment {
            if let Some(f) = self.caches.features.get(&(d, i)) {
                return Ok(f.clone());
            }
        }
        let seed = derive_seed(self.cfg.seed, &format!("augment/{}/{slot}", self.step));
        let img = preprocess(&ds[d][i].image, &self.preprocess, Mode::Train, seed)?;
        let f = self.model.image_features(&img)?;
        if !augment {
            self.caches.features.insert((d, i), f.clone());
        }
        Ok(f)
    }

    /// Mean loss of a batch; records the graph in `s`.
    fn batch_loss(&mut self, batch: &[(usize, usize)]) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let qformer_frozen = !self.model.store.names().any(|n| n.starts_with("qformer.") && self.mask.is_trainable(n));
        // Everything the graph does not differentiate is computed up front.
        let mut inputs = Vec::with_capacity(batch.len());
        if let StageData::Multimodal(ds) = self.data {
            for (slot, &(d, i)) in batch.iter().enumerate() {
                let f = self.features(d, i, slot)?;
                let q = if qformer_frozen {
                    let key = (d, i);
                    let cacheable = !(self.preprocess.random_crop || self.preprocess.hflip);
                    match self.caches.qformer.get(&key) {
                        Some(q) if cacheable => Some(q.clone()),
                        _ => {
                            let q = self.model.qformer_output(&f, &ds[d][i].instruction)?;
                            if cacheable {
                                self.caches.qformer.insert(key, q.clone());
                            }
                            Some(q)
                        }
                    }
                } else {
                    None
                };
                inputs.push((f, q));
            }
        }
        let mask = self.mask.clone();
        let model: &Model = self.model;
        let mut s = Session::with_trainable(&model.store, move |n| mask.is_trainable(n));
        let mut losses = Vec::with_capacity(batch.len());
        for (slot, &(d, i)) in batch.iter().enumerate() {
            let loss = match self.data {
                StageData::Text(records) => {
                    let r = &records[i];
                    let prefix = model.text_prefix(&mut s, &r.prefix)?;
                    model.sequence_loss(&mut s, prefix, &r.target)?
                }
                StageData::Multimodal(ds) => {
                    let sample = &ds[d][i];
                    let (f, q) = &inputs[slot];
                    let prefix = model.multimodal_prefix(&mut s, f, &sample.instruction, q.as_ref())?;
                    model.sequence_loss(&mut s, prefix, &sample.target)?
                }
            };
            losses.push(loss);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = s.graph.add(total, l)?;
        }
        let mean = s.graph.scale(total, 1.0 / losses.len() as f64);
        let value = s.graph.value(mean).item();
        if !value.is_finite() {
            return Ok((value, BTreeMap::new()));
        }
        s.graph.backward(mean)?;
        Ok((value, s.trainable_grads()))
    }

    /// Loss of the next batch, without updating anything.
    pub fn peek_loss(&mut self) -> Result<f64> {
        let saved = self.sampler.clone();
        let batch = self.draw_batch();
        self.sampler = saved;
        Ok(self.batch_loss(&batch)?.0)
    }

    pub fn train_step(&mut self) -> Result<MetricRecord> {
        let batch = self.draw_batch();
        let (loss, mut grads) = self.batch_loss(&batch)?;
        if !loss.is_finite() {
            return Err(CromeError::NonFiniteLoss { stage: self.cfg.stage.to_string(), step: self.step, value: loss });
        }
        if let Some(max) = self.cfg.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        let lr = self.cfg.schedule().lr_at(self.step);
        adamw_step(&mut self.model.store, &grads, &mut self.opt, lr, &self.cfg.optimizer)?;
        let rec = MetricRecord {
            step: self.step,
            stage: self.cfg.stage.to_string(),
            lr,
            loss,
            wall_ms: if self.record_wall_clock { self.started.elapsed().as_millis() as u64 } else { 0 },
        };
        self.step += 1;
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            stage: self.cfg.stage.to_string(),
            step: self.step as u64,
            rng: Some(RngState::capture(self.sampler.rng())),
            config_fingerprint: self.config_fingerprint.clone(),
        };
        Checkpoint::from_parts(meta, &self.model.store, Some(&self.opt))
    }

    /// Trains up to `max_steps`, handing every record to `sink`.
    pub fn run(&mut self, sink: &mut dyn FnMut(&MetricRecord, &Self) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.max_steps {
            let rec = self.train_step()?;
            sink(&rec, self)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Append metric records here as JSON lines.
    pub metrics_path: Option<PathBuf>,
    /// Directory for interval checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Report `wall_ms = 0` so logs from identical runs are byte-identical.
    pub deterministic_log: bool,
    pub config_fingerprint: String,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub metrics: Vec<MetricRecord>,
    pub checkpoint: Checkpoint,
}

pub fn train_stage(
    model: &mut Model,
    cfg: &StageConfig,
    data: &StageData,
    preprocess: &PreprocessSpec,
    opts: &TrainOptions,
) -> Result<StageOutcome> {
    let mut trainer = Trainer::new(model, cfg.clone(), data, preprocess.clone())?;
    run_trainer(&mut trainer, cfg, opts)
}

pub fn run_trainer(trainer: &mut Trainer, cfg: &StageConfig, opts: &TrainOptions) -> Result<StageOutcome> {
    use std::io::Write;
    trainer.record_wall_clock = !opts.deterministic_log;
    trainer.config_fingerprint = opts.config_fingerprint.clone();
    let mut log = match &opts.metrics_path {
        Some(p) => Some(std::io::BufWriter::new(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| CromeError::io(p, e))?,
        )),
        None => None,
    };
    let mut metrics = Vec::new();
    trainer.run(&mut |rec, t| {
        if let (Some(w), Some(p)) = (log.as_mut(), opts.metrics_path.as_ref()) {
            let line = serde_json::to_string(rec).map_err(|e| CromeError::Data(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| CromeError::io(p, e))?;
        }
        metrics.push(rec.clone());
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && t.step() % cfg.checkpoint_every == 0 && t.step() < cfg.max_steps {
                let path = dir.join(format!("{}.step{}.ckpt", cfg.stage, t.step()));
                t.checkpoint().save(&path)?;
            }
        }
        Ok(())
    })?;
    if let (Some(w), Some(p)) = (log.as_mut(), opts.metrics_path.as_ref()) {
        w.flush().map_err(|e| CromeError::io(p, e))?;
    }
    Ok(StageOutcome { metrics, checkpoint: trainer.checkpoint() })
}
