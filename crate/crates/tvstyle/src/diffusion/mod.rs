//! Forward diffusion, the text-conditioned denoiser, guidance, the DDIM
//! sampler, pretraining and checkpoints.

mod checkpoint;
pub mod codec;
mod model;
mod sampler;
mod train;
mod unet;

use candle_core::DType;
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusClip, CorpusManifest, DspConfigRecord};
use crate::error::Result;
use crate::textcond::Vocabulary;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_KIND};
pub use codec::{Codec, CodecConfig, CodecMode};
pub use model::{DiffusionModel, ModelConfig, ScheduleConfig, MODEL_PREFIXES};
pub use sampler::{
    ddim_sample, ddim_step, gaussian, gaussian_from, guided_eps, predict_x0, q_sample, q_sample_batch, SamplerConfig,
};
pub use train::{training_clips, TrainClip, TrainConfig, TrainProgress, Trainer};
pub use unet::{mse, UNet, UNetConfig};

/// Hex SHA-256 of a manifest's serialized form.
pub fn corpus_hash(manifest: &CorpusManifest) -> Result<String> {
    Ok(hex::encode(Sha256::digest(manifest.to_jsonl()?.as_bytes())))
}

/// Fresh trainer over a corpus with a vocabulary built from its styles.
pub fn new_trainer(
    manifest: &CorpusManifest,
    clips: &[CorpusClip],
    model_cfg: &ModelConfig,
    train: &TrainConfig,
) -> Result<Trainer> {
    let vocab = Vocabulary::for_styles(&manifest.styles)?;
    let model = DiffusionModel::new(model_cfg, manifest.dsp_config.n_mels, vocab, DType::F32, train.seed)?;
    let data = training_clips(&model, clips)?;
    Trainer::new(model, data, train.clone())
}

/// Snapshot of a trainer as a checkpoint (including optimizer state).
pub fn snapshot(trainer: &Trainer, manifest: &CorpusManifest) -> Result<(CheckpointMeta, Vec<crate::nn::Block>)> {
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.to_string(),
        model: trainer.model.config.clone(),
        dsp: DspConfigRecord::from(&manifest.dsp()),
        vocab: trainer.model.vocab.tokens().to_vec(),
        train: trainer.cfg.clone(),
        progress: trainer.progress.clone(),
        corpus_hash: corpus_hash(manifest)?,
    };
    Ok((meta, trainer.optimizer_blocks()?))
}

/// Runs pretraining to completion and returns the resulting checkpoint.
pub fn pretrain(
    manifest: &CorpusManifest,
    clips: &[CorpusClip],
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    on_step: impl FnMut(&TrainProgress),
) -> Result<Checkpoint> {
    let mut trainer = new_trainer(manifest, clips, model_cfg, train)?;
    trainer.run(None, on_step)?;
    into_checkpoint(trainer, manifest)
}

pub fn into_checkpoint(trainer: Trainer, manifest: &CorpusManifest) -> Result<Checkpoint> {
    let (meta, optimizer) = snapshot(&trainer, manifest)?;
    Ok(Checkpoint {
        model: trainer.model,
        meta,
        optimizer,
    })
}
