//! Learning the pseudo-word for a style: the placeholder embedding and,
//! optionally, a time-varying encoder are optimized through the frozen
//! diffusion model to reconstruct the style clips.

mod trajectory;

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tvstyle_core::MelSpectrogram;

use crate::container::{write_sidecar, Container};
use crate::corpus::derive_seed;
use crate::diffusion::{
    ddim_sample, gaussian, gaussian_from, mse, q_sample_batch, Checkpoint, DiffusionModel, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::textcond::{encode_text, Placeholder, PseudoWord, Tve, TveConfig, INIT_TOKEN, PLACEHOLDER};

pub use trajectory::{embedding_trajectory, Trajectory};

pub const INVERSION_KIND: &str = "inversion";

/// Whether the pseudo-word gets a time-varying encoder or stays a single
/// fixed vector (classic textual inversion).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionMode {
    Tve,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub lr: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    /// Loss curve is summarized every this many steps in the log.
    pub eval_every: usize,
    pub seed: u64,
    pub mode: InversionMode,
    pub tve: TveConfig,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_steps: 1500,
            batch_size: 1,
            eval_every: 100,
            seed: 0,
            mode: InversionMode::Tve,
            tve: TveConfig::default(),
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("inversion lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "inversion batch_size and eval_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Header of an inversion artifact file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub kind: String,
    pub style: String,
    pub mode: InversionMode,
    pub style_clip_ids: Vec<String>,
    /// Parameter digest of the checkpoint the pseudo-word was learned on.
    pub checkpoint_hash: String,
    pub num_steps: usize,
    pub d_model: usize,
    pub tve: TveConfig,
    pub init_token: String,
    pub config: InversionConfig,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// A learned pseudo-word with its provenance.
pub struct InversionArtifact {
    pub meta: ArtifactMeta,
    pub store: ParamStore,
    pub pseudo: PseudoWord,
}

fn build_pseudo(
    store: &mut ParamStore,
    init: &Tensor,
    d: usize,
    num_steps: usize,
    mode: InversionMode,
    tve: &TveConfig,
) -> Result<PseudoWord> {
    let mut root = store.root();
    let placeholder = Placeholder::new(&mut root.pp("placeholder"), init, INIT_TOKEN)?;
    let tve = match mode {
        InversionMode::Tve => Some(Tve::new(&mut root.pp("tve"), d, num_steps, tve)?),
        InversionMode::Fixed => None,
    };
    Ok(PseudoWord { placeholder, tve })
}

impl InversionArtifact {
    /// Untrained pseudo-word: placeholder copied from the init token and a
    /// zero-offset encoder.
    pub fn untrained(
        model: &DiffusionModel,
        style: &str,
        cfg: &InversionConfig,
        checkpoint_hash: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        let id = model
            .vocab
            .id(INIT_TOKEN)
            .ok_or_else(|| Error::Config(format!("vocabulary lacks the init token {INIT_TOKEN:?}")))?;
        let init = model.text.token_embedding(id)?.detach();
        let d = model.config.text.d_model;
        let mut store = ParamStore::new(DType::F32, derive_seed(cfg.seed, 0x7476_6500));
        let pseudo = build_pseudo(&mut store, &init, d, model.num_steps(), cfg.mode, &cfg.tve)?;
        Ok(Self {
            meta: ArtifactMeta {
                kind: INVERSION_KIND.to_string(),
                style: style.to_string(),
                mode: cfg.mode,
                style_clip_ids: Vec::new(),
                checkpoint_hash: checkpoint_hash.to_string(),
                num_steps: model.num_steps(),
                d_model: d,
                tve: cfg.tve.clone(),
                init_token: INIT_TOKEN.to_string(),
                config: cfg.clone(),
                final_loss: f64::NAN,
                losses: Vec::new(),
            },
            store,
            pseudo,
        })
    }

    /// Fails unless the artifact was learned on this checkpoint.
    pub fn check_compatible(&self, ckpt: &Checkpoint) -> Result<()> {
        let h = ckpt.params_hash()?;
        if h != self.meta.checkpoint_hash {
            return Err(Error::Config(format!(
                "artifact for style {:?} was learned on checkpoint {} but {} was given",
                self.meta.style,
                short(&self.meta.checkpoint_hash),
                short(&h)
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = Container {
            meta: serde_json::to_value(&self.meta)?,
            blocks: self.store.to_blocks()?,
        };
        c.write(path)?;
        write_sidecar(path, &self.meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let meta: ArtifactMeta = serde_json::from_value(c.meta)
            .map_err(|e| Error::Format(format!("{}: bad artifact header: {e}", path.display())))?;
        if meta.kind != INVERSION_KIND {
            return Err(Error::Format(format!(
                "{} holds a {}, not an inversion artifact",
                path.display(),
                meta.kind
            )));
        }
        let mut store = ParamStore::from_blocks(&c.blocks, DType::F32)?;
        let expected = store.num_params();
        let dummy = Tensor::zeros(meta.d_model, DType::F32, store.device())?;
        let pseudo = build_pseudo(&mut store, &dummy, meta.d_model, meta.num_steps, meta.mode, &meta.tve)?;
        if store.num_params() != expected {
            return Err(Error::Format("artifact parameters do not match its header".into()));
        }
        Ok(Self { meta, store, pseudo })
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// A style clip given to inversion.
pub struct StyleClip<'a> {
    pub id: &'a str,
    pub mel: &'a MelSpectrogram,
}

/// Optimizes the pseudo-word on 1 to 5 style clips through the frozen model.
/// `on_step(step, loss)` is called after every update.
pub fn invert_style(
    ckpt: &Checkpoint,
    style: &str,
    clips: &[StyleClip],
    cfg: &InversionConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<InversionArtifact> {
    cfg.validate()?;
    if clips.is_empty() || clips.len() > 5 {
        return Err(Error::Input(format!(
            "inversion takes 1 to 5 style clips, got {}",
            clips.len()
        )));
    }
    let model = &ckpt.model;
    let frames = model.config.frames;
    for c in clips {
        if c.mel.n_mels() != model.n_mels {
            return Err(Error::Config(format!(
                "style clip {} has {} mel bands but the checkpoint was trained on {}",
                c.id,
                c.mel.n_mels(),
                model.n_mels
            )));
        }
        if c.mel.n_frames() < frames {
            return Err(Error::Input(format!(
                "style clip {} is shorter than {frames} frames",
                c.id
            )));
        }
    }
    let mut art = InversionArtifact::untrained(model, style, cfg, &ckpt.params_hash()?)?;
    art.meta.style_clip_ids = clips.iter().map(|c| c.id.to_string()).collect();
    let mut opt = Adam::new(&art.store, &["placeholder.", "tve."], AdamConfig::with_lr(cfg.lr))?;
    let ids = model.caption_ids(PLACEHOLDER)?;
    let t_max = model.num_steps();
    let mut losses = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step as u64));
        let mut crops = Vec::with_capacity(cfg.batch_size);
        let mut ts = Vec::with_capacity(cfg.batch_size);
        let mut picked = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let k = rng.random_range(0..clips.len());
            let m = clips[k].mel;
            let start = rng.random_range(0..=m.n_frames() - frames);
            crops.push(m.crop(start, frames));
            ts.push(rng.random_range(1..=t_max));
            picked.push((k, start));
        }
        let refs: Vec<&MelSpectrogram> = crops.iter().collect();
        let z0 = model.encode_mels(&refs)?;
        let eps = gaussian_from(&mut rng, z0.dims(), z0.dtype(), z0.device())?;
        let z_t = q_sample_batch(&model.schedule, &z0, &ts, &eps)?;
        let conds = ts
            .iter()
            .map(|&t| Ok(encode_text(&ids, t, Some(&art.pseudo), &model.text, &model.vocab)?.values))
            .collect::<Result<Vec<_>>>()?;
        let cond = Tensor::stack(&conds, 0)?;
        let pred = model.unet.forward(&z_t, &ts, &cond)?;
        let loss = mse(&pred, &eps)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            let recent: Vec<f64> = losses.iter().rev().take(10).rev().copied().collect();
            let detail: Vec<String> = picked
                .iter()
                .zip(&ts)
                .map(|((k, s), t)| format!("clip {} frame {s} t={t}", clips[*k].id))
                .collect();
            return Err(Error::Training(format!(
                "non-finite inversion loss at step {step} ({}); recent losses {recent:?}",
                detail.join(", ")
            )));
        }
        let grads = loss.backward()?;
        opt.step(&art.store, &grads)?;
        losses.push(value);
        on_step(step, value);
        if (step + 1) % cfg.eval_every == 0 {
            let w = &losses[losses.len() - cfg.eval_every..];
            log::info!(
                "inversion step {}: mean loss {:.4}",
                step + 1,
                w.iter().sum::<f64>() / w.len() as f64
            );
        }
    }
    art.meta.final_loss = tail_mean(&losses, cfg.eval_every).unwrap_or(f64::NAN);
    art.meta.losses = losses;
    Ok(art)
}

/// Mean of the first `n` entries.
pub fn head_mean(xs: &[f64], n: usize) -> Option<f64> {
    mean_of(&xs[..n.min(xs.len())])
}

/// Mean of the last `n` entries.
pub fn tail_mean(xs: &[f64], n: usize) -> Option<f64> {
    mean_of(&xs[xs.len().saturating_sub(n)..])
}

fn mean_of(w: &[f64]) -> Option<f64> {
    (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64)
}

/// Samples from pure noise at `t = T`, one output per seed, conditioned on
/// `caption` (which may contain the placeholder when `pseudo` is given).
pub fn generate(
    model: &DiffusionModel,
    caption: &str,
    pseudo: Option<&PseudoWord>,
    seeds: &[u64],
    sampler: &SamplerConfig,
) -> Result<Vec<MelSpectrogram>> {
    sampler.validate(model.num_steps())?;
    let (c, h, w) = model.latent_shape();
    let noise = seeds
        .iter()
        .map(|&s| gaussian(&[c, h, w], s, model.dtype(), model.device()))
        .collect::<Result<Vec<_>>>()?;
    let z = Tensor::stack(&noise, 0)?;
    let uncond = model.uncond()?;
    let mut cond = |t: usize| model.condition(caption, t, pseudo);
    let out = ddim_sample(
        &model.unet,
        &model.schedule,
        &z,
        model.num_steps(),
        &mut cond,
        &uncond,
        sampler,
    )?;
    model.decode_latents(&out)
}

/// Reconstructions of the style from the pseudo-word alone.
pub fn reconstruct(
    art: &InversionArtifact,
    ckpt: &Checkpoint,
    seeds: &[u64],
    sampler: &SamplerConfig,
) -> Result<Vec<MelSpectrogram>> {
    art.check_compatible(ckpt)?;
    generate(&ckpt.model, PLACEHOLDER, Some(&art.pseudo), seeds, sampler)
}
