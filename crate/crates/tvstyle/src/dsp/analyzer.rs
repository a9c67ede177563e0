use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use tvstyle_core::mel::LogScale;
use tvstyle_core::{DspConfig, MelFilterbank, MelSpectrogram, Waveform};

use super::stft::Stft;
use crate::error::{Error, Result};

/// Output peak ceiling for resynthesized audio.
const PEAK_CEILING: f32 = 0.99;

/// Refinement passes applied to the mel pseudo-inverse.
const NNLS_ITERS: usize = 50;

/// Reusable analysis/synthesis state for one `DspConfig`.
pub struct MelAnalyzer {
    cfg: DspConfig,
    stft: Stft,
    fb: MelFilterbank,
}

/// Spectral convergence after each Griffin-Lim iteration.
#[derive(Debug, Clone)]
pub struct GriffinLimTrace {
    pub spectral_convergence: Vec<f64>,
}

impl MelAnalyzer {
    pub fn new(cfg: &DspConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            stft: Stft::new(cfg.n_fft, cfg.hop),
            fb: MelFilterbank::new(cfg)?,
        })
    }

    pub fn config(&self) -> &DspConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.fb
    }

    fn scale(&self) -> LogScale {
        self.cfg.scale()
    }

    /// Linear power per frame, normalized so a full-scale sinusoid at a bin
    /// center has power `A^2 / 4`.
    pub fn power_frames(&self, samples: &[f64]) -> Vec<Vec<f64>> {
        let norm = self.stft.window_sum().powi(2);
        self.stft
            .forward(samples)
            .into_iter()
            .map(|frame| frame.iter().map(|c| c.norm_sqr() / norm).collect())
            .collect()
    }

    pub fn mel_spectrogram(&self, w: &Waveform) -> Result<MelSpectrogram> {
        w.validate()?;
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::Config(format!(
                "waveform sample rate {} does not match configured {}",
                w.sample_rate, self.cfg.sample_rate
            )));
        }
        if w.samples.len() < self.cfg.n_fft {
            return Err(Error::Input(format!(
                "waveform has {} samples, fewer than n_fft = {}",
                w.samples.len(),
                self.cfg.n_fft
            )));
        }
        let samples: Vec<f64> = w.samples.iter().map(|&s| s as f64).collect();
        let frames = self.power_frames(&samples);
        let n_frames = frames.len();
        let n_mels = self.cfg.n_mels;
        let scale = self.scale();
        let mut values = vec![0.0f32; n_mels * n_frames];
        let mut mel = vec![0.0; n_mels];
        for (f, p) in frames.iter().enumerate() {
            self.fb.apply(p, &mut mel);
            for (b, &m) in mel.iter().enumerate() {
                values[b * n_frames + f] = scale.normalize(m);
            }
        }
        Ok(MelSpectrogram::new(n_mels, n_frames, values)?)
    }

    /// Target STFT magnitudes (unnormalized FFT units) for a spectrogram.
    fn target_magnitudes(&self, m: &MelSpectrogram) -> Vec<Vec<f64>> {
        let scale = self.scale();
        let amp = self.stft.window_sum();
        let mut mel = vec![0.0; m.n_mels()];
        let mut lin = vec![0.0; self.fb.n_bins()];
        (0..m.n_frames())
            .map(|f| {
                for (b, slot) in mel.iter_mut().enumerate() {
                    *slot = scale.denormalize_above_floor(m.get(b, f));
                }
                self.fb.invert_nonneg(&mel, &mut lin, NNLS_ITERS);
                lin.iter().map(|p| p.sqrt() * amp).collect()
            })
            .collect()
    }

    pub fn griffin_lim(&self, m: &MelSpectrogram) -> Result<Waveform> {
        self.griffin_lim_traced(m).map(|(w, _)| w)
    }

    pub fn griffin_lim_traced(&self, m: &MelSpectrogram) -> Result<(Waveform, GriffinLimTrace)> {
        if m.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("spectrogram contains non-finite values".into()));
        }
        if m.n_mels() != self.cfg.n_mels {
            return Err(Error::Config(format!(
                "spectrogram has {} bands, configuration expects {}",
                m.n_mels(),
                self.cfg.n_mels
            )));
        }
        let target = self.target_magnitudes(m);
        let len = (m.n_frames() - 1) * self.cfg.hop;
        let target_norm = target.iter().flatten().map(|a| a * a).sum::<f64>().sqrt();

        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.gl_seed);
        let mut spec: Vec<Vec<Complex64>> = target
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&a| {
                        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                        Complex64::from_polar(a, phi)
                    })
                    .collect()
            })
            .collect();

        let mut trace = Vec::with_capacity(self.cfg.gl_iters);
        let mut signal = self.stft.inverse(&spec, len);
        for _ in 0..self.cfg.gl_iters {
            let rebuilt = self.stft.forward(&signal);
            let mut err = 0.0;
            for ((row, target_row), rebuilt_row) in spec.iter_mut().zip(&target).zip(&rebuilt) {
                for ((slot, &a), c) in row.iter_mut().zip(target_row).zip(rebuilt_row) {
                    let d = c.norm() - a;
                    err += d * d;
                    *slot = if c.norm() > 0.0 {
                        c * (a / c.norm())
                    } else {
                        Complex64::new(a, 0.0)
                    };
                }
            }
            trace.push(if target_norm > 0.0 {
                err.sqrt() / target_norm
            } else {
                0.0
            });
            signal = self.stft.inverse(&spec, len);
        }

        let mut samples: Vec<f32> = signal.iter().map(|&s| s as f32).collect();
        let peak = samples.iter().fold(0.0f32, |p, s| p.max(s.abs()));
        if peak > PEAK_CEILING {
            let g = PEAK_CEILING / peak;
            samples.iter_mut().for_each(|s| *s *= g);
        }
        Ok((
            Waveform::new(samples, self.cfg.sample_rate)?,
            GriffinLimTrace {
                spectral_convergence: trace,
            },
        ))
    }
}

pub fn mel_spectrogram(w: &Waveform, cfg: &DspConfig) -> Result<MelSpectrogram> {
    MelAnalyzer::new(cfg)?.mel_spectrogram(w)
}

pub fn griffin_lim(m: &MelSpectrogram, cfg: &DspConfig) -> Result<Waveform> {
    MelAnalyzer::new(cfg)?.griffin_lim(m)
}
