use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tvstyle_core::MelSpectrogram;

use super::model::DiffusionModel;
use super::sampler::{gaussian_from, q_sample_batch};
use super::unet::mse;
use crate::corpus::{derive_seed, CorpusClip};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Block};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_uncond: f64,
    pub grad_clip: f64,
    /// Autoencoder steps run before diffusion training (learned codec only).
    pub codec_steps: usize,
    pub codec_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-4,
            p_uncond: 0.1,
            grad_clip: 1.0,
            codec_steps: 2000,
            codec_lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.codec_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!(
                "train.p_uncond = {} outside [0, 1]",
                self.p_uncond
            )));
        }
        Ok(())
    }
}

/// Loss history and position of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub codec_steps_done: usize,
    pub codec_losses: Vec<f64>,
    /// Diffusion steps taken so far.
    pub step: u64,
    pub losses: Vec<f64>,
}

impl TrainProgress {
    /// Mean loss over the last `n` diffusion steps.
    pub fn recent_loss(&self, n: usize) -> Option<f64> {
        if self.losses.is_empty() {
            return None;
        }
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// One pretraining example: a full-length mel and its caption ids.
#[derive(Debug, Clone)]
pub struct TrainClip {
    pub mel: MelSpectrogram,
    pub ids: Vec<usize>,
}

/// Pretraining caption clips drawn from a corpus, held-out styles excluded.
pub fn training_clips(model: &DiffusionModel, clips: &[CorpusClip]) -> Result<Vec<TrainClip>> {
    clips
        .iter()
        .filter(|c| !c.record.held_out)
        .map(|c| {
            if c.mel.n_mels() != model.n_mels {
                return Err(Error::Config(format!(
                    "clip {} has {} mel bands, model expects {}",
                    c.record.id,
                    c.mel.n_mels(),
                    model.n_mels
                )));
            }
            Ok(TrainClip {
                mel: c.mel.clone(),
                ids: model.caption_ids(&c.record.caption)?,
            })
        })
        .collect()
}

const EPOCH_STREAM: u64 = 0x6570_6f63_6800_0000;
const CODEC_STREAM: u64 = 0x636f_6465_6300_0000;

/// Deterministic trainer: every step draws its randomness from a stream
/// keyed by the step index, so a resumed run replays exactly.
pub struct Trainer {
    pub model: DiffusionModel,
    pub cfg: TrainConfig,
    pub progress: TrainProgress,
    clips: Vec<TrainClip>,
    empty_ids: Vec<usize>,
    opt: Adam,
    codec_opt: Option<Adam>,
}

impl Trainer {
    pub fn new(model: DiffusionModel, clips: Vec<TrainClip>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if clips.is_empty() {
            return Err(Error::Input("no pretraining clips".into()));
        }
        let frames = model.config.frames;
        if let Some(c) = clips.iter().find(|c| c.mel.n_frames() < frames) {
            return Err(Error::Input(format!(
                "clip with {} frames is shorter than the {frames}-frame model window",
                c.mel.n_frames()
            )));
        }
        let adam = |lr: f64| AdamConfig {
            grad_clip: cfg.grad_clip,
            ..AdamConfig::with_lr(lr)
        };
        let opt = Adam::new(&model.store, &["text.", "unet."], adam(cfg.lr))?;
        let codec_opt = if model.codec.is_identity() {
            None
        } else {
            Some(Adam::new(&model.store, &["codec."], adam(cfg.codec_lr))?)
        };
        let empty_ids = model.caption_ids("")?;
        Ok(Self {
            model,
            cfg,
            progress: TrainProgress::default(),
            clips,
            empty_ids,
            opt,
            codec_opt,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.clips.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.epochs as u64
    }

    pub fn finished(&self) -> bool {
        self.progress.codec_steps_done >= self.codec_target() && self.progress.step >= self.total_steps()
    }

    fn codec_target(&self) -> usize {
        if self.codec_opt.is_some() {
            self.cfg.codec_steps
        } else {
            0
        }
    }

    fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, k) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.clips.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.cfg.seed ^ EPOCH_STREAM,
            epoch,
        )));
        let b = self.cfg.batch_size;
        order[k * b..((k + 1) * b).min(order.len())].to_vec()
    }

    fn crops(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Vec<MelSpectrogram> {
        let frames = self.model.config.frames;
        idx.iter()
            .map(|&i| {
                let m = &self.clips[i].mel;
                let start = rng.random_range(0..=m.n_frames() - frames);
                m.crop(start, frames)
            })
            .collect()
    }

    /// One diffusion training step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.progress.step;
        let idx = self.batch_indices(step);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, step));
        let crops = self.crops(&idx, &mut rng);
        let t_max = self.model.num_steps();
        let mut ts = Vec::with_capacity(idx.len());
        let mut ids = Vec::with_capacity(idx.len());
        for &i in &idx {
            ts.push(rng.random_range(1..=t_max));
            let drop = rng.random::<f64>() < self.cfg.p_uncond;
            ids.push(if drop {
                self.empty_ids.clone()
            } else {
                self.clips[i].ids.clone()
            });
        }
        let refs: Vec<&MelSpectrogram> = crops.iter().collect();
        let z0 = self.model.encode_mels(&refs)?;
        let eps = gaussian_from(&mut rng, z0.dims(), z0.dtype(), z0.device())?;
        let z_t = q_sample_batch(&self.model.schedule, &z0, &ts, &eps)?;
        let cond = self.model.text.encode_batch(&ids)?;
        let pred = self.model.unet.forward(&z_t, &ts, &cond)?;
        let loss = mse(&pred, &eps)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Training(format!("non-finite loss {value} at step {step}")));
        }
        let grads = loss.backward()?;
        self.opt.step(&self.model.store, &grads)?;
        self.progress.step += 1;
        self.progress.losses.push(value);
        Ok(value)
    }

    /// One autoencoder reconstruction step.
    pub fn codec_step(&mut self) -> Result<f64> {
        let k = self.progress.codec_steps_done as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed ^ CODEC_STREAM, k));
        let idx: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| rng.random_range(0..self.clips.len()))
            .collect();
        let crops = self.crops(&idx, &mut rng);
        let refs: Vec<&MelSpectrogram> = crops.iter().collect();
        let x = self.model.mels_to_tensor(&refs)?;
        let recon = self.model.codec.decode(&self.model.codec.encode(&x)?)?;
        let loss = mse(&recon, &x)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Training(format!("non-finite codec loss at step {k}")));
        }
        let grads = loss.backward()?;
        let opt = self
            .codec_opt
            .as_mut()
            .ok_or_else(|| Error::Usage("identity codec has nothing to train".into()))?;
        opt.step(&self.model.store, &grads)?;
        self.progress.codec_steps_done += 1;
        self.progress.codec_losses.push(value);
        Ok(value)
    }

    /// Trains until finished or until `stop_at` diffusion steps, calling
    /// `on_step` after each diffusion step.
    pub fn run(&mut self, stop_at: Option<u64>, mut on_step: impl FnMut(&TrainProgress)) -> Result<()> {
        while self.progress.codec_steps_done < self.codec_target() {
            self.codec_step()?;
        }
        let end = stop_at.unwrap_or(u64::MAX).min(self.total_steps());
        while self.progress.step < end {
            self.step()?;
            on_step(&self.progress);
        }
        Ok(())
    }

    /// Optimizer moments for checkpointing, prefixed `optim.` / `optim_codec.`.
    pub fn optimizer_blocks(&self) -> Result<Vec<Block>> {
        let mut out: Vec<Block> = self
            .opt
            .state_blocks()?
            .into_iter()
            .map(|b| Block {
                name: format!("optim.{}", b.name),
                ..b
            })
            .collect();
        if let Some(o) = &self.codec_opt {
            out.extend(o.state_blocks()?.into_iter().map(|b| Block {
                name: format!("optim_codec.{}", b.name),
                ..b
            }));
        }
        Ok(out)
    }

    /// Restores a run saved with [`Trainer::optimizer_blocks`].
    pub fn resume(&mut self, progress: TrainProgress, blocks: &[Block]) -> Result<()> {
        let strip = |prefix: &str| -> Vec<Block> {
            blocks
                .iter()
                .filter_map(|b| {
                    b.name.strip_prefix(prefix).map(|n| Block {
                        name: n.to_string(),
                        ..b.clone()
                    })
                })
                .collect()
        };
        self.opt.restore(progress.step, &strip("optim."))?;
        if let Some(o) = &mut self.codec_opt {
            o.restore(progress.codec_steps_done as u64, &strip("optim_codec."))?;
        }
        self.progress = progress;
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
