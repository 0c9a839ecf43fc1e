//! Synthetic shape-scene datasets.

pub mod io;
pub mod preprocess;
pub mod sampler;
pub mod scene;
pub mod tasks;
pub mod vocab;

use serde::{Deserialize, Serialize};

pub use io::{dedup_samples, read_samples, write_samples, DatasetManifest, ManifestEntry};
pub use preprocess::{preprocess, Mode, PreprocessSpec};
pub use sampler::{balanced_probabilities, BalancedSampler};
pub use scene::{render_scene, RawImage, SceneSpec};
pub use tasks::{generate_dataset, GeneratedDataset, GroundTruth, TaskKind};
pub use vocab::{detokenize, tokenize, Vocab};

use crate::error::{CromeError, Result};

/// One image-instruction record. The image is kept as raw levels and
/// preprocessed when a batch is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub image: RawImage,
    pub instruction: Vec<usize>,
    pub target: Vec<usize>,
    #[serde(default)]
    pub choices: Option<Vec<String>>,
    pub tag: String,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let v = Vocab::standard().len();
        if self.target.is_empty() {
            return Err(CromeError::Data(format!("{}: empty target", self.tag)));
        }
        if let Some(&bad) = self.instruction.iter().chain(&self.target).find(|&&t| t >= v) {
            return Err(CromeError::Data(format!("{}: token id {bad} outside vocabulary of {v}", self.tag)));
        }
        if self.image.levels.len() != self.image.height * self.image.width * self.image.channels {
            return Err(CromeError::Data(format!("{}: image size does not match its shape", self.tag)));
        }
        Ok(())
    }

    pub fn gold_text(&self) -> Result<String> {
        detokenize(&self.target)
    }
}
