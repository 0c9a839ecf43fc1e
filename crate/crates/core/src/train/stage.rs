use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CromeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Text-only training of the toy language model, frozen afterwards.
    LmPretrain,
    /// Caption pretraining.
    Pretrain,
    /// Instruction tuning.
    Instruct,
    /// Adapter-only fine-tuning on the held-out task.
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::LmPretrain, Stage::Pretrain, Stage::Instruct, Stage::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::LmPretrain => "lm-pretrain",
            Stage::Pretrain => "pretrain",
            Stage::Instruct => "instruct",
            Stage::Finetune => "finetune",
        }
    }

    /// Stage whose checkpoint this one starts from.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::LmPretrain => None,
            Stage::Pretrain => Some(Stage::LmPretrain),
            Stage::Instruct => Some(Stage::Pretrain),
            Stage::Finetune => Some(Stage::Instruct),
        }
    }

    pub fn is_multimodal(self) -> bool {
        self != Stage::LmPretrain
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = CromeError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| CromeError::Config(format!("unknown stage {s:?}")))
    }
}

/// Trainable parameter-name prefixes; everything else is frozen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    prefixes: Vec<String>,
}

const ALWAYS_FROZEN_IN_MULTIMODAL: [&str; 2] = ["vision.", "lm."];

impl FreezeMask {
    pub fn custom(prefixes: &[&str]) -> Self {
        Self { prefixes: prefixes.iter().map(|p| p.to_string()).collect() }
    }

    pub fn prefixes(&self) -> &[String] {
        &self.prefixes
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Rejects masks that would unfreeze the vision encoder or the LM in a
    /// multimodal stage.
    pub fn validate_for(&self, stage: Stage) -> Result<()> {
        if !stage.is_multimodal() {
            return Ok(());
        }
        for p in &self.prefixes {
            if ALWAYS_FROZEN_IN_MULTIMODAL.iter().any(|f| p.starts_with(f) || f.starts_with(p.as_str())) {
                return Err(CromeError::Config(format!(
                    "stage {stage} may not train parameters under {p:?}"
                )));
            }
        }
        Ok(())
    }
}

pub fn build_freeze_mask(stage: Stage) -> FreezeMask {
    match stage {
        Stage::LmPretrain => FreezeMask::custom(&["lm."]),
        Stage::Pretrain => FreezeMask::custom(&["proj.", "adapter."]),
        Stage::Instruct => FreezeMask::custom(&["qformer.", "proj.", "adapter."]),
        Stage::Finetune => FreezeMask::custom(&["adapter."]),
    }
}
