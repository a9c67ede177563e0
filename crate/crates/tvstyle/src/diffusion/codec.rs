//! Map between mel spectrograms and the space the denoiser operates in.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{silu, upsample2x, Builder, Conv2d};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    Identity,
    LearnedAutoencoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub mode: CodecMode,
    /// Latent channels of the learned mode.
    pub latent_channels: usize,
    pub hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            mode: CodecMode::Identity,
            latent_channels: 4,
            hidden: 32,
        }
    }
}

impl CodecConfig {
    /// Latent shape `(c, h, w)` for an `(n_mels, frames)` spectrogram.
    pub fn latent_shape(&self, n_mels: usize, frames: usize) -> Result<(usize, usize, usize)> {
        match self.mode {
            CodecMode::Identity => Ok((1, n_mels, frames)),
            CodecMode::LearnedAutoencoder => {
                if !n_mels.is_multiple_of(4) || !frames.is_multiple_of(4) {
                    return Err(Error::Config(format!(
                        "learned codec needs mel size divisible by 4, got {n_mels}x{frames}"
                    )));
                }
                if self.latent_channels == 0 || self.hidden == 0 {
                    return Err(Error::Config("codec widths must be positive".into()));
                }
                Ok((self.latent_channels, n_mels / 4, frames / 4))
            }
        }
    }
}

/// Convolutional autoencoder with 4x spatial compression. Latents are
/// squashed by `tanh` so their scale stays comparable to the unit-range
/// mels the identity mode diffuses.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    enc1: Conv2d,
    enc2: Conv2d,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    dec_out: Conv2d,
}

impl Autoencoder {
    pub fn new(b: &mut Builder, cfg: &CodecConfig) -> Result<Self> {
        let (h, c) = (cfg.hidden, cfg.latent_channels);
        Ok(Self {
            enc1: Conv2d::new(&mut b.pp("enc1"), 1, h, 3, 2)?,
            enc2: Conv2d::new(&mut b.pp("enc2"), h, h, 3, 2)?,
            enc_out: Conv2d::new(&mut b.pp("enc_out"), h, c, 3, 1)?,
            dec_in: Conv2d::new(&mut b.pp("dec_in"), c, h, 3, 1)?,
            dec1: Conv2d::new(&mut b.pp("dec1"), h, h, 3, 1)?,
            dec2: Conv2d::new(&mut b.pp("dec2"), h, h, 3, 1)?,
            dec_out: Conv2d::new(&mut b.pp("dec_out"), h, 1, 3, 1)?,
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let h = silu(&self.enc1.forward(x)?)?;
        let h = silu(&self.enc2.forward(&h)?)?;
        Ok(self.enc_out.forward(&h)?.tanh()?)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let h = silu(&self.dec_in.forward(z)?)?;
        let h = silu(&self.dec1.forward(&upsample2x(&h)?)?)?;
        let h = silu(&self.dec2.forward(&upsample2x(&h)?)?)?;
        self.dec_out.forward(&h)
    }
}

#[derive(Debug, Clone)]
pub enum Codec {
    Identity,
    Learned(Autoencoder),
}

impl Codec {
    pub fn new(b: &mut Builder, cfg: &CodecConfig) -> Result<Self> {
        match cfg.mode {
            CodecMode::Identity => Ok(Codec::Identity),
            CodecMode::LearnedAutoencoder => Ok(Codec::Learned(Autoencoder::new(&mut b.pp("codec"), cfg)?)),
        }
    }

    /// `(B, 1, n_mels, frames)` mels to latents.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Codec::Identity => Ok(x.clone()),
            Codec::Learned(ae) => ae.encode(x),
        }
    }

    /// Latents back to `(B, 1, n_mels, frames)` mels (not yet clamped).
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Codec::Identity => Ok(z.clone()),
            Codec::Learned(ae) => ae.decode(z),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Codec::Identity)
    }
}
