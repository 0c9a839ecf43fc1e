//! Whole-run configuration and the glue that turns it into stage data.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::data::preprocess::PreprocessSpec;
use crate::data::tasks::{generate_dataset, text_corpus, TaskKind};
use crate::data::vocab::{Vocab, HELD_OUT_WORDS};
use crate::data::{DatasetManifest, Sample};
use crate::error::{CromeError, Result};
use crate::params::derive_seed;
use crate::train::{Stage, StageConfig, StageData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub kind: TaskKind,
    pub size: usize,
}

impl DatasetSpec {
    pub fn new(name: &str, kind: TaskKind, size: usize) -> Self {
        Self { name: name.into(), kind, size }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub lm_corpus_size: usize,
    pub pretrain: Vec<DatasetSpec>,
    pub instruct: Vec<DatasetSpec>,
    pub finetune: Vec<DatasetSpec>,
    /// Size of the held-out evaluation split of the fine-tuning task.
    pub eval_size: usize,
    /// Multiplier on instruction-data sizes for the "additional data" variant.
    pub extra_instruct_factor: usize,
    /// Read instruction data from a manifest instead of generating it.
    #[serde(default)]
    pub instruct_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfigs {
    pub lm_pretrain: StageConfig,
    pub pretrain: StageConfig,
    pub instruct: StageConfig,
    pub finetune: StageConfig,
}

impl StageConfigs {
    pub fn get(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::LmPretrain => &self.lm_pretrain,
            Stage::Pretrain => &self.pretrain,
            Stage::Instruct => &self.instruct,
            Stage::Finetune => &self.finetune,
        }
    }

    pub fn get_mut(&mut self, stage: Stage) -> &mut StageConfig {
        match stage {
            Stage::LmPretrain => &mut self.lm_pretrain,
            Stage::Pretrain => &mut self.pretrain,
            Stage::Instruct => &mut self.instruct,
            Stage::Finetune => &mut self.finetune,
        }
    }
}

/// Sizes for the gradient check, small enough for central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    pub d_model: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub bottleneck: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub preprocess: PreprocessSpec,
    pub stages: StageConfigs,
    pub grad_check: GradCheckConfig,
    /// Bottleneck widths for the sweep command.
    pub sweep_m: Vec<usize>,
}

impl RunConfig {
    pub fn toy() -> Self {
        let model = ModelConfig::toy();
        let image_size = model.vision.image_size;
        let mut stages = StageConfigs {
            lm_pretrain: StageConfig::default_for(Stage::LmPretrain),
            pretrain: StageConfig::default_for(Stage::Pretrain),
            instruct: StageConfig::default_for(Stage::Instruct),
            finetune: StageConfig::default_for(Stage::Finetune),
        };
        for st in Stage::ALL {
            stages.get_mut(st).seed = 0;
        }
        // 5120 adapter weights barely move at 1e-4 within 2000 steps
        stages.finetune.lr_peak = 3e-3;
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/toy"),
            model,
            data: DataConfig {
                image_size,
                lm_corpus_size: 20_000,
                pretrain: vec![DatasetSpec::new("caption", TaskKind::Caption, 4000)],
                instruct: vec![
                    DatasetSpec::new("caption", TaskKind::Caption, 1000),
                    DatasetSpec::new("count-qa", TaskKind::CountQa, 4000),
                    DatasetSpec::new("attribute-qa", TaskKind::AttributeQa, 4000),
                    DatasetSpec::new("mc-qa", TaskKind::McQa, 2000),
                ],
                finetune: vec![DatasetSpec::new("position-mc", TaskKind::PositionMc, 2000)],
                eval_size: 400,
                extra_instruct_factor: 4,
                instruct_manifest: None,
            },
            preprocess: PreprocessSpec::toy(image_size),
            stages,
            grad_check: GradCheckConfig {
                eps: 1e-5,
                tolerance: 1e-4,
                d_model: 8,
                n_heads: 2,
                seq_len: 5,
                bottleneck: 3,
            },
            sweep_m: vec![4, 8, 16, 32],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CromeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Re-serialized form; formatting and key order of the source file do
    /// not affect it.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hash of the canonical config. The output directory is left out; it
    /// does not affect any result.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.canonical().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data.image_size != self.model.vision.image_size
            || self.preprocess.target_size != self.model.vision.image_size
        {
            return Err(CromeError::Config(format!(
                "data.image_size {}, preprocess.target_size {} and model.vision.image_size {} must agree",
                self.data.image_size, self.preprocess.target_size, self.model.vision.image_size
            )));
        }
        for st in Stage::ALL {
            let sc = self.stages.get(st);
            if sc.stage != st {
                return Err(CromeError::Config(format!("stages.{} declares stage {}", st.name(), sc.stage)));
            }
            sc.validate()?;
        }
        for (what, specs) in [("pretrain", &self.data.pretrain), ("instruct", &self.data.instruct), ("finetune", &self.data.finetune)] {
            if specs.is_empty() && !(what == "instruct" && self.data.instruct_manifest.is_some()) {
                return Err(CromeError::Config(format!("data.{what} lists no datasets")));
            }
            let mut names = BTreeSet::new();
            for s in specs {
                if s.size == 0 {
                    return Err(CromeError::Config(format!("data.{what}: dataset {} has size 0", s.name)));
                }
                if !names.insert(&s.name) {
                    return Err(CromeError::Config(format!("data.{what}: duplicate dataset {}", s.name)));
                }
            }
        }
        if let Some(p) = &self.data.instruct_manifest {
            if !p.exists() {
                return Err(CromeError::Config(format!("instruct manifest {} does not exist", p.display())));
            }
        }
        if self.data.eval_size == 0 || self.data.lm_corpus_size == 0 || self.data.extra_instruct_factor == 0 {
            return Err(CromeError::Config("data sizes must be positive".into()));
        }
        if self.sweep_m.is_empty() || self.sweep_m.contains(&0) {
            return Err(CromeError::Config("sweep_m needs positive widths".into()));
        }
        Ok(())
    }

    fn generate(&self, label: &str, specs: &[DatasetSpec], scale: usize) -> Result<Vec<Vec<Sample>>> {
        specs
            .iter()
            .map(|s| {
                let seed = derive_seed(self.seed, &format!("{label}/{}", s.name));
                Ok(generate_dataset(s.kind, s.size * scale, seed, self.data.image_size)?.samples)
            })
            .collect()
    }

    /// Training data for a stage. `instruct_scale` multiplies the
    /// instruction dataset sizes.
    pub fn stage_data(&self, stage: Stage, instruct_scale: usize) -> Result<StageData> {
        Ok(match stage {
            Stage::LmPretrain => StageData::Text(text_corpus(self.data.lm_corpus_size, derive_seed(self.seed, "text"))?),
            Stage::Pretrain => StageData::Multimodal(self.generate("pretrain", &self.data.pretrain, 1)?),
            Stage::Instruct => {
                let ds = match &self.data.instruct_manifest {
                    Some(p) => {
                        let m = DatasetManifest::read(p)?;
                        m.entries.iter().map(|e| crate::data::read_samples(&e.path)).collect::<Result<_>>()?
                    }
                    None => self.generate("instruct", &self.data.instruct, instruct_scale)?,
                };
                check_no_leakage(&ds)?;
                StageData::Multimodal(ds)
            }
            Stage::Finetune => StageData::Multimodal(self.generate("finetune", &self.data.finetune, 1)?),
        })
    }

    /// Held-out evaluation split of the fine-tuning task (disjoint seed).
    pub fn eval_data(&self) -> Result<Vec<Sample>> {
        let spec = &self.data.finetune[0];
        let seed = derive_seed(self.seed, &format!("eval/{}", spec.name));
        Ok(generate_dataset(spec.kind, self.data.eval_size, seed, self.data.image_size)?.samples)
    }
}

/// Fails if any instruction-tuning record uses vocabulary reserved for the
/// held-out task.
pub fn check_no_leakage(datasets: &[Vec<Sample>]) -> Result<()> {
    let held: BTreeSet<usize> = Vocab::standard().held_out_ids().into_iter().collect();
    for ds in datasets {
        for s in ds {
            if s.tag == TaskKind::PositionMc.name() {
                return Err(CromeError::Leakage(format!("instruction data contains {} records", s.tag)));
            }
            if let Some(t) = s.instruction.iter().chain(&s.target).find(|t| held.contains(t)) {
                return Err(CromeError::Leakage(format!(
                    "instruction data ({}) uses held-out word {:?}",
                    s.tag,
                    Vocab::standard().word(*t)?
                )));
            }
            if let Some(c) = s.choices.iter().flatten().find(|c| HELD_OUT_WORDS.contains(&c.as_str())) {
                return Err(CromeError::Leakage(format!("instruction data ({}) offers held-out choice {c:?}", s.tag)));
            }
        }
    }
    Ok(())
}
