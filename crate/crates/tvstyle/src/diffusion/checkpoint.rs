use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use tvstyle_core::DspConfig;

use super::model::{DiffusionModel, ModelConfig};
use super::train::{TrainConfig, TrainProgress};
use crate::container::{json_hash, write_sidecar, Container, FORMAT_VERSION};
use crate::corpus::DspConfigRecord;
use crate::error::{Error, Result};
use crate::nn::Block;
use crate::textcond::Vocabulary;

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Metadata stored in the container header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub model: ModelConfig,
    pub dsp: DspConfigRecord,
    pub vocab: Vec<String>,
    pub train: TrainConfig,
    pub progress: TrainProgress,
    pub corpus_hash: String,
}

impl CheckpointMeta {
    /// Hash of everything that defines the architecture and its inputs.
    pub fn config_hash(&self) -> Result<String> {
        json_hash(&(&self.model, &self.dsp, &self.vocab))
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format_version: u32,
    #[serde(flatten)]
    meta: &'a CheckpointMeta,
    config_hash: String,
    params_sha256: String,
    num_params: usize,
    final_loss: Option<f64>,
}

/// A pretrained model plus the bookkeeping needed to resume or verify it.
pub struct Checkpoint {
    pub model: DiffusionModel,
    pub meta: CheckpointMeta,
    /// Optimizer moments (names prefixed `optim.`), absent for frozen loads.
    pub optimizer: Vec<Block>,
}

impl Checkpoint {
    pub fn dsp(&self) -> DspConfig {
        (&self.meta.dsp).into()
    }

    /// Digest of the model weights; inversion artifacts record it.
    pub fn params_hash(&self) -> Result<String> {
        self.model.digest()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Self::save_parts(&self.model, &self.meta, &self.optimizer, path)
    }

    /// Writes a checkpoint from borrowed parts (a live trainer's model).
    pub fn save_parts(model: &DiffusionModel, meta: &CheckpointMeta, optimizer: &[Block], path: &Path) -> Result<()> {
        let mut blocks = model.store.to_blocks()?;
        blocks.extend(optimizer.iter().cloned());
        let c = Container {
            meta: serde_json::to_value(meta)?,
            blocks,
        };
        c.write(path)?;
        write_sidecar(
            path,
            &Sidecar {
                format_version: FORMAT_VERSION,
                meta,
                config_hash: meta.config_hash()?,
                params_sha256: model.digest()?,
                num_params: model.store.num_params(),
                final_loss: meta.progress.recent_loss(1),
            },
        )
    }

    /// Loads a checkpoint. `frozen` detaches every model tensor (inference
    /// and inversion); otherwise optimizer state is kept for resuming.
    pub fn load(path: &Path, dtype: DType, frozen: bool) -> Result<Self> {
        let c = Container::read(path)?;
        let meta: CheckpointMeta = serde_json::from_value(c.meta)
            .map_err(|e| Error::Format(format!("{}: bad checkpoint header: {e}", path.display())))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "{} holds a {}, not a checkpoint",
                path.display(),
                meta.kind
            )));
        }
        let (optim, params): (Vec<Block>, Vec<Block>) = c.blocks.into_iter().partition(|b| b.name.starts_with("optim"));
        let vocab = Vocabulary::from_tokens(meta.vocab.clone())?;
        let model = DiffusionModel::from_blocks(&meta.model, meta.dsp.n_mels, vocab, &params, dtype, frozen)?;
        Ok(Self {
            model,
            meta,
            optimizer: if frozen { Vec::new() } else { optim },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tvck");
        let ckpt = testutil::checkpoint(4);
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path, DType::F32, true).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.params_hash().unwrap(), ckpt.params_hash().unwrap());
        assert_eq!(back.dsp(), testutil::dsp());
        assert!(crate::container::sidecar_path(&path).exists());
    }

    #[test]
    fn rejects_other_container_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tvck");
        let mut ckpt = testutil::checkpoint(4);
        ckpt.meta.kind = "inversion".into();
        ckpt.save(&path).unwrap();
        assert!(matches!(
            Checkpoint::load(&path, DType::F32, true),
            Err(Error::Format(_))
        ));
    }
}
