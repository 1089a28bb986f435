use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Adam, NamedTensor, ParamStore};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sim::Point;

use super::config::RunConfig;

const FORMAT_VERSION: u32 = 1;

/// Resumable ChaCha position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// Parameters, optimizer moments and RNG position after `epoch` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub epoch: usize,
    pub params: Vec<NamedTensor>,
    pub anchors: Vec<Vec<Vec<Point>>>,
    pub optimizer: Adam,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, epoch: usize, model: &Model, optimizer: &Adam, rng: &ChaCha8Rng) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            epoch,
            params: model.params.entries().to_vec(),
            anchors: model.planner.anchors.clone(),
            optimizer: optimizer.clone(),
            rng: RngState::capture(rng),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename keeps the previous file intact on failure
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    /// Rebuilds the model described by the stored config and loads weights.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model(), self.config.seed)?;
        let mut stored = ParamStore::new();
        for e in &self.params {
            stored.add(e.name.clone(), e.value.clone());
        }
        model
            .params
            .load_from(&stored)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if self.anchors.len() != model.planner.anchors.len()
            || self
                .anchors
                .iter()
                .zip(&model.planner.anchors)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Checkpoint("anchor set does not match planner config".into()));
        }
        model.planner.anchors = self.anchors.clone();
        Ok(model)
    }
}
