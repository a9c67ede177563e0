use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use tvstyle_core::{MelSpectrogram, NoiseSchedule};

use super::codec::{Codec, CodecConfig};
use super::unet::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::{Block, ParamStore};
use crate::textcond::{encode_text, PseudoWord, TextEncoder, TextEncoderConfig, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    /// Betas at the 1000-step reference length; rescaled by `1000 / steps`.
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 256,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::scaled_linear(
            self.steps,
            self.beta_start,
            self.beta_end,
        )?)
    }
}

/// Everything needed to rebuild the network stack from a parameter list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Spectrogram frames per model window.
    pub frames: usize,
    pub schedule: ScheduleConfig,
    pub unet: UNetConfig,
    pub text: TextEncoderConfig,
    pub codec: CodecConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            schedule: ScheduleConfig::default(),
            unet: UNetConfig::default(),
            text: TextEncoderConfig::default(),
            codec: CodecConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, n_mels: usize) -> Result<()> {
        self.schedule.build()?;
        self.unet.validate()?;
        self.text.validate()?;
        let (c, h, w) = self.codec.latent_shape(n_mels, self.frames)?;
        if self.unet.in_channels != c {
            return Err(Error::Config(format!(
                "unet.in_channels = {} but the codec produces {c} channels",
                self.unet.in_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("latent size {h}x{w} must be divisible by 4")));
        }
        if self.unet.cond_dim != self.text.d_model {
            return Err(Error::Config(format!(
                "unet.cond_dim = {} must equal text.d_model = {}",
                self.unet.cond_dim, self.text.d_model
            )));
        }
        Ok(())
    }
}

/// Text encoder, denoiser, codec and schedule sharing one parameter store.
/// Parameter names are prefixed `text.`, `unet.` and `codec.`.
pub struct DiffusionModel {
    pub config: ModelConfig,
    pub n_mels: usize,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub unet: UNet,
    pub codec: Codec,
    pub schedule: NoiseSchedule,
}

pub const MODEL_PREFIXES: [&str; 3] = ["text.", "unet.", "codec."];

impl DiffusionModel {
    /// Fresh, seeded initialization.
    pub fn new(config: &ModelConfig, n_mels: usize, vocab: Vocabulary, dtype: DType, seed: u64) -> Result<Self> {
        Self::build(config, n_mels, vocab, ParamStore::new(dtype, seed), false)
    }

    /// Rebuilds from stored parameters. With `frozen`, module tensors are
    /// detached so no gradient ever reaches them.
    pub fn from_blocks(
        config: &ModelConfig,
        n_mels: usize,
        vocab: Vocabulary,
        blocks: &[Block],
        dtype: DType,
        frozen: bool,
    ) -> Result<Self> {
        let store = ParamStore::from_blocks(blocks, dtype)?;
        let expected = store.num_params();
        let m = Self::build(config, n_mels, vocab, store, frozen)?;
        if m.store.num_params() != expected {
            return Err(Error::Format(
                "stored parameters do not match the model configuration".into(),
            ));
        }
        Ok(m)
    }

    fn build(
        config: &ModelConfig,
        n_mels: usize,
        vocab: Vocabulary,
        mut store: ParamStore,
        frozen: bool,
    ) -> Result<Self> {
        config.validate(n_mels)?;
        let schedule = config.schedule.build()?;
        let (text, unet, codec) = {
            let mut root = if frozen { store.frozen_root() } else { store.root() };
            let text = TextEncoder::new(&mut root.pp("text"), vocab.len(), &config.text)?;
            let unet = UNet::new(&mut root.pp("unet"), &config.unet)?;
            let codec = Codec::new(&mut root, &config.codec)?;
            (text, unet, codec)
        };
        Ok(Self {
            config: config.clone(),
            n_mels,
            vocab,
            store,
            text,
            unet,
            codec,
            schedule,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn num_steps(&self) -> usize {
        self.schedule.num_steps()
    }

    /// `(c, h, w)` of one latent.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.config
            .codec
            .latent_shape(self.n_mels, self.config.frames)
            .expect("validated at construction")
    }

    /// Stacks model-sized mels into `(B, 1, n_mels, frames)`.
    pub fn mels_to_tensor(&self, mels: &[&MelSpectrogram]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(mels.len() * self.n_mels * self.config.frames);
        for m in mels {
            if m.n_mels() != self.n_mels || m.n_frames() != self.config.frames {
                return Err(Error::Input(format!(
                    "model expects {}x{} mels, got {}x{}",
                    self.n_mels,
                    self.config.frames,
                    m.n_mels(),
                    m.n_frames()
                )));
            }
            data.extend_from_slice(m.values());
        }
        Ok(
            Tensor::from_vec(data, (mels.len(), 1, self.n_mels, self.config.frames), self.device())?
                .to_dtype(self.dtype())?,
        )
    }

    /// Mels to latents, detached from autograd.
    pub fn encode_mels(&self, mels: &[&MelSpectrogram]) -> Result<Tensor> {
        Ok(self.codec.encode(&self.mels_to_tensor(mels)?)?.detach())
    }

    /// Latents `(B, c, h, w)` to mels clamped to the unit range.
    pub fn decode_latents(&self, z: &Tensor) -> Result<Vec<MelSpectrogram>> {
        let x = self.codec.decode(z)?.to_dtype(DType::F32)?;
        let (b, _, h, w) = x.dims4()?;
        let flat = x.flatten_all()?.to_vec1::<f32>()?;
        flat.chunks(h * w)
            .take(b)
            .map(|c| Ok(MelSpectrogram::clipped(h, w, c.to_vec())?))
            .collect()
    }

    pub fn caption_ids(&self, caption: &str) -> Result<Vec<usize>> {
        self.vocab.tokenize(caption, self.config.text.max_len)
    }

    /// Condition set `(1, L, d)` for a caption at timestep `t`.
    pub fn condition(&self, caption: &str, t: usize, pseudo: Option<&PseudoWord>) -> Result<Tensor> {
        let ids = self.caption_ids(caption)?;
        encode_text(&ids, t, pseudo, &self.text, &self.vocab)?.batched()
    }

    /// Condition for the empty caption.
    pub fn uncond(&self) -> Result<Tensor> {
        self.condition("", 0, None)
    }

    /// Digest of the frozen network weights (text encoder, denoiser, codec).
    pub fn digest(&self) -> Result<String> {
        self.store.digest(&MODEL_PREFIXES)
    }
}
