//! Content-to-style transfer: partial diffusion of the content, optional
//! determined re-noising with the model's own noise estimate, then DDIM
//! denoising under the pseudo-word.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use tvstyle_core::schedule::strength_to_timestep;
use tvstyle_core::{DspConfig, MelSpectrogram, NoiseSchedule, Waveform};

use crate::corpus::derive_seed;
use crate::diffusion::{ddim_sample, gaussian, guided_eps, q_sample, Checkpoint, DiffusionModel, SamplerConfig};
use crate::dsp::MelAnalyzer;
use crate::error::{Error, Result};
use crate::inversion::InversionArtifact;
use crate::textcond::{PseudoWord, PLACEHOLDER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StylizeParams {
    pub strength: f64,
    pub scale: f64,
    pub n_steps: usize,
    pub seed: u64,
    pub bias_reduced: bool,
}

impl Default for StylizeParams {
    fn default() -> Self {
        Self {
            strength: 0.65,
            scale: 4.0,
            n_steps: 50,
            seed: 0,
            bias_reduced: true,
        }
    }
}

impl StylizeParams {
    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Config(format!(
                "strength must lie in [0, 1], got {}",
                self.strength
            )));
        }
        self.sampler(0).validate(num_steps)
    }

    fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_steps: self.n_steps,
            eta: 0.0,
            guidance_scale: self.scale,
            seed,
        }
    }
}

/// Noises `z_c` to `t_p = round(T * strength)` with noise from `seed`.
/// Strength 0 returns the content untouched.
pub fn partial_diffuse(z_c: &Tensor, strength: f64, s: &NoiseSchedule, seed: u64) -> Result<(Tensor, usize)> {
    let t_p = strength_to_timestep(strength, s.num_steps())?;
    if t_p == 0 {
        return Ok((z_c.clone(), 0));
    }
    let eps = gaussian(z_c.dims(), seed, z_c.dtype(), z_c.device())?;
    Ok((q_sample(s, z_c, t_p, &eps)?, t_p))
}

/// Batched [`partial_diffuse`]: row `i` of `z_c: (B, ...)` uses `seeds[i]`.
pub fn partial_diffuse_batch(z_c: &Tensor, strength: f64, s: &NoiseSchedule, seeds: &[u64]) -> Result<(Tensor, usize)> {
    let t_p = strength_to_timestep(strength, s.num_steps())?;
    if seeds.len() != z_c.dim(0)? {
        return Err(Error::Input(format!(
            "{} seeds for a batch of {}",
            seeds.len(),
            z_c.dim(0)?
        )));
    }
    if t_p == 0 {
        return Ok((z_c.clone(), 0));
    }
    let row_shape = &z_c.dims()[1..];
    let eps = seeds
        .iter()
        .map(|&sd| gaussian(row_shape, sd, z_c.dtype(), z_c.device()))
        .collect::<Result<Vec<_>>>()?;
    Ok((q_sample(s, z_c, t_p, &Tensor::stack(&eps, 0)?)?, t_p))
}

/// Re-noises the clean content with the model's noise prediction at `t_p`
/// in place of the random draw. Returns `(M_hat_cn, z_hat)`; at `t_p = 0`
/// nothing is predicted and `None` is returned.
pub fn determined_diffuse(
    model: &DiffusionModel,
    z_c: &Tensor,
    m_cn: &Tensor,
    t_p: usize,
    cond: &Tensor,
    uncond: &Tensor,
    scale: f64,
) -> Result<Option<(Tensor, Tensor)>> {
    if t_p == 0 {
        return Ok(None);
    }
    let z_hat = guided_eps(&model.unet, m_cn, t_p, cond, uncond, scale)?.detach();
    Ok(Some((renoise(&model.schedule, z_c, &z_hat, t_p)?, z_hat)))
}

/// `sqrt(ab_tp) * z_c + sqrt(1 - ab_tp) * z_hat`.
pub fn renoise(s: &NoiseSchedule, z_c: &Tensor, z_hat: &Tensor, t_p: usize) -> Result<Tensor> {
    q_sample(s, z_c, t_p, z_hat)
}

/// Latent-space intermediates of one stylization run.
#[derive(Debug, Clone)]
pub struct Intermediates {
    /// Partially diffused content.
    pub m_cn: Tensor,
    /// Predicted noise at `t_p` (bias-reduced runs only).
    pub z_hat: Option<Tensor>,
    /// Determined re-noising of the content (bias-reduced runs only).
    pub m_hat_cn: Option<Tensor>,
    /// Final latent after denoising.
    pub output: Tensor,
}

/// Stylizes a batch of model-sized windows, one noise seed per row.
pub fn stylize_latents(
    model: &DiffusionModel,
    pseudo: &PseudoWord,
    z_c: &Tensor,
    seeds: &[u64],
    p: &StylizeParams,
) -> Result<(Intermediates, usize)> {
    p.validate(model.num_steps())?;
    let (m_cn, t_p) = partial_diffuse_batch(z_c, p.strength, &model.schedule, seeds)?;
    if t_p == 0 {
        return Ok((
            Intermediates {
                m_cn: m_cn.clone(),
                z_hat: None,
                m_hat_cn: None,
                output: m_cn,
            },
            0,
        ));
    }
    let uncond = model.uncond()?;
    let (start, z_hat, m_hat_cn) = if p.bias_reduced {
        let cond = model.condition(PLACEHOLDER, t_p, Some(pseudo))?.detach();
        let (m_hat, z_hat) = determined_diffuse(model, z_c, &m_cn, t_p, &cond, &uncond, p.scale)?.expect("t_p > 0");
        (m_hat.clone(), Some(z_hat), Some(m_hat))
    } else {
        (m_cn.clone(), None, None)
    };
    let mut cond = |t: usize| model.condition(PLACEHOLDER, t, Some(pseudo));
    let output = ddim_sample(
        &model.unet,
        &model.schedule,
        &start,
        t_p,
        &mut cond,
        &uncond,
        &p.sampler(seeds[0]),
    )?;
    Ok((
        Intermediates {
            m_cn,
            z_hat,
            m_hat_cn,
            output,
        },
        t_p,
    ))
}

/// Stylizes model-sized mels, row `i` noised with `seeds[i]`.
pub fn stylize_batch(
    model: &DiffusionModel,
    pseudo: &PseudoWord,
    mels: &[&MelSpectrogram],
    seeds: &[u64],
    p: &StylizeParams,
) -> Result<Vec<MelSpectrogram>> {
    let z_c = model.encode_mels(mels)?;
    let (inter, t_p) = stylize_latents(model, pseudo, &z_c, seeds, p)?;
    if t_p == 0 && model.codec.is_identity() {
        return Ok(mels.iter().map(|m| (*m).clone()).collect());
    }
    model.decode_latents(&inter.output)
}

/// A full stylization request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StylizationRequest {
    pub content: String,
    pub artifact: String,
    #[serde(flatten)]
    pub params: StylizeParams,
}

/// Output of [`stylize`] with the request echoed back.
#[derive(Debug, Clone)]
pub struct StylizationResult {
    pub request: StylizationRequest,
    pub t_p: usize,
    pub mel: MelSpectrogram,
    pub waveform: Waveform,
    /// Per window, mels of `M_cn`, `M_hat_cn` and `z_hat` when requested.
    pub intermediates: Option<Vec<WindowIntermediates>>,
}

#[derive(Debug, Clone)]
pub struct WindowIntermediates {
    pub start_frame: usize,
    pub m_cn: MelSpectrogram,
    pub m_hat_cn: Option<MelSpectrogram>,
    pub z_hat: Option<MelSpectrogram>,
}

/// Window start frames covering `n_frames` with 50% overlap.
pub fn window_starts(n_frames: usize, window: usize) -> Vec<usize> {
    let hop = (window / 2).max(1);
    if n_frames <= window {
        return vec![0];
    }
    let count = (n_frames - window).div_ceil(hop) + 1;
    (0..count).map(|i| i * hop).collect()
}

/// Weight of sample `i` of `len` for an overlap-add crossfade with
/// neighbours on the given sides.
fn fade(i: usize, len: usize, fade_len: usize, left: bool, right: bool) -> f64 {
    let mut w = 1.0;
    if left && i < fade_len {
        w *= (i as f64 + 0.5) / fade_len as f64;
    }
    if right && i + fade_len >= len {
        w *= (len - i) as f64 / fade_len as f64 - 0.5 / fade_len as f64;
    }
    w
}

/// Overlap-adds windowed signals starting at `starts` (in units of the
/// signal) with linear crossfades over `overlap` samples.
pub fn crossfade(parts: &[Vec<f32>], starts: &[usize], overlap: usize, total: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; total];
    let mut norm = vec![0.0f64; total];
    let n = parts.len();
    for (k, (p, &s)) in parts.iter().zip(starts).enumerate() {
        for (i, &v) in p.iter().enumerate() {
            if s + i >= total {
                break;
            }
            let w = fade(i, p.len(), overlap, k > 0, k + 1 < n);
            acc[s + i] += w * v as f64;
            norm[s + i] += w;
        }
    }
    acc.iter()
        .zip(&norm)
        .map(|(a, w)| if *w > 0.0 { (a / w) as f32 } else { 0.0 })
        .collect()
}

fn latent_to_mel(model: &DiffusionModel, z: &Tensor) -> Result<Vec<MelSpectrogram>> {
    model.decode_latents(z)
}

/// Stylizes a content spectrogram of any length in overlapping windows,
/// resynthesizing each window with Griffin-Lim and crossfading the audio.
pub fn stylize(
    content: &MelSpectrogram,
    request: StylizationRequest,
    art: &InversionArtifact,
    ckpt: &Checkpoint,
    keep_intermediates: bool,
) -> Result<StylizationResult> {
    art.check_compatible(ckpt)?;
    let model = &ckpt.model;
    let p = request.params.clone();
    p.validate(model.num_steps())?;
    let dsp: DspConfig = ckpt.dsp();
    let analyzer = MelAnalyzer::new(&dsp)?;
    if content.n_mels() != model.n_mels {
        return Err(Error::Config(format!(
            "content has {} mel bands, checkpoint expects {}",
            content.n_mels(),
            model.n_mels
        )));
    }
    let t_p = strength_to_timestep(p.strength, model.num_steps())?;
    if t_p == 0 {
        return Ok(StylizationResult {
            request,
            t_p,
            mel: content.clone(),
            waveform: analyzer.griffin_lim(content)?,
            intermediates: None,
        });
    }
    let frames = model.config.frames;
    let starts = window_starts(content.n_frames(), frames);
    let windows: Vec<MelSpectrogram> = starts.iter().map(|&s| content.crop(s, frames)).collect();
    let refs: Vec<&MelSpectrogram> = windows.iter().collect();
    let seeds: Vec<u64> = (0..windows.len()).map(|w| derive_seed(p.seed, w as u64)).collect();
    let z_c = model.encode_mels(&refs)?;
    let (inter, _) = stylize_latents(model, &art.pseudo, &z_c, &seeds, &p)?;
    let outs = latent_to_mel(model, &inter.output)?;

    let n = content.n_frames();
    let mel_parts: Vec<Vec<f32>> = outs.iter().map(|m| m.values().to_vec()).collect();
    let mel = crossfade_mels(&mel_parts, &starts, frames, frames / 2, content.n_mels(), n)?;
    let hop = dsp.hop;
    let audio: Vec<Vec<f32>> = outs
        .iter()
        .map(|m| Ok(analyzer.griffin_lim(m)?.samples))
        .collect::<Result<_>>()?;
    let total = n * hop;
    let sample_starts: Vec<usize> = starts.iter().map(|s| s * hop).collect();
    let samples = crossfade(&audio, &sample_starts, frames / 2 * hop, total);
    let waveform = Waveform::new(samples, dsp.sample_rate)?;

    let intermediates = if keep_intermediates {
        let m_cn = latent_to_mel(model, &inter.m_cn)?;
        let m_hat = inter.m_hat_cn.as_ref().map(|t| latent_to_mel(model, t)).transpose()?;
        let z_hat = inter.z_hat.as_ref().map(|t| latent_to_mel(model, t)).transpose()?;
        Some(
            starts
                .iter()
                .enumerate()
                .map(|(i, &s)| WindowIntermediates {
                    start_frame: s,
                    m_cn: m_cn[i].clone(),
                    m_hat_cn: m_hat.as_ref().map(|v| v[i].clone()),
                    z_hat: z_hat.as_ref().map(|v| v[i].clone()),
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(StylizationResult {
        request,
        t_p,
        mel,
        waveform,
        intermediates,
    })
}

/// Crossfades band-major window mels along time into an `n_frames` mel.
fn crossfade_mels(
    parts: &[Vec<f32>],
    starts: &[usize],
    frames: usize,
    overlap: usize,
    n_mels: usize,
    n_frames: usize,
) -> Result<MelSpectrogram> {
    let mut values = vec![0.0f32; n_mels * n_frames];
    for b in 0..n_mels {
        let rows: Vec<Vec<f32>> = parts.iter().map(|p| p[b * frames..(b + 1) * frames].to_vec()).collect();
        let band = crossfade(&rows, starts, overlap, n_frames);
        values[b * n_frames..(b + 1) * n_frames].copy_from_slice(&band);
    }
    Ok(MelSpectrogram::clipped(n_mels, n_frames, values)?)
}
