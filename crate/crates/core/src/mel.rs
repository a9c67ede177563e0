//! Mel-scale analysis primitives: configuration, waveform and spectrogram
//! containers, triangular filterbank, and the log-power normalization that
//! maps spectrogram values into [-1, 1].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub ref_power: f64,
    pub gl_iters: usize,
    pub gl_seed: u64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22_050,
            n_fft: 1024,
            hop: 256,
            n_mels: 64,
            fmin: 30.0,
            fmax: 11_025.0,
            log_floor: 1e-5,
            ref_power: 1.0,
            gl_iters: 64,
            gl_seed: 0x6c5f_7068_6173_6531,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.into()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.n_fft < 16 || !self.n_fft.is_power_of_two() {
            return bad("n_fft must be a power of two >= 16");
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return bad("hop must satisfy 0 < hop <= n_fft");
        }
        if self.n_mels < 8 {
            return bad("n_mels must be at least 8");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("frequency range must satisfy 0 <= fmin < fmax <= sample_rate / 2");
        }
        if !(self.log_floor > 0.0 && self.ref_power > self.log_floor) {
            return bad("log_floor must be positive and below ref_power");
        }
        if self.gl_iters == 0 {
            return bad("gl_iters must be at least 1");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn scale(&self) -> LogScale {
        LogScale {
            log_floor: self.log_floor,
            ref_power: self.ref_power,
        }
    }

    /// Number of STFT frames produced for `n_samples` input samples with
    /// centered framing.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples / self.hop + 1
    }
}

/// Mono PCM signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        let w = Self { samples, sample_rate };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(CoreError::Input("sample_rate must be positive".into()));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(CoreError::Input(format!("sample {i} is not finite")));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let e: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        libm::sqrt(e / self.samples.len() as f64)
    }
}

/// Normalized log-mel matrix, `n_mels` rows by `n_frames` columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    n_mels: usize,
    n_frames: usize,
    values: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(n_mels: usize, n_frames: usize, values: Vec<f32>) -> Result<Self> {
        if n_mels == 0 || n_frames == 0 {
            return Err(CoreError::Shape("spectrogram must be non-empty".into()));
        }
        if values.len() != n_mels * n_frames {
            return Err(CoreError::Shape(format!(
                "{} values for a {n_mels}x{n_frames} spectrogram",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Input(format!("value {i} is not finite")));
        }
        Ok(Self {
            n_mels,
            n_frames,
            values,
        })
    }

    /// Builds a spectrogram, clipping values into [-1, 1].
    pub fn clipped(n_mels: usize, n_frames: usize, mut values: Vec<f32>) -> Result<Self> {
        for v in values.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        Self::new(n_mels, n_frames, values)
    }

    pub fn filled(n_mels: usize, n_frames: usize, value: f32) -> Self {
        Self {
            n_mels,
            n_frames,
            values: vec![value; n_mels * n_frames],
        }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.values[band * self.n_frames + frame]
    }

    pub fn in_unit_range(&self) -> bool {
        self.values.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    /// Frames `[start, start + len)`; frames past the end are filled with -1.
    pub fn crop(&self, start: usize, len: usize) -> Self {
        let mut out = vec![-1.0f32; self.n_mels * len];
        for b in 0..self.n_mels {
            for f in 0..len {
                if start + f < self.n_frames {
                    out[b * len + f] = self.get(b, start + f);
                }
            }
        }
        Self {
            n_mels: self.n_mels,
            n_frames: len,
            values: out,
        }
    }

    pub fn frame(&self, frame: usize) -> Vec<f32> {
        (0..self.n_mels).map(|b| self.get(b, frame)).collect()
    }

    pub fn reversed_in_time(&self) -> Self {
        let mut out = self.clone();
        for b in 0..self.n_mels {
            out.values[b * self.n_frames..(b + 1) * self.n_frames].reverse();
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        let n = self.values.len().min(other.values.len()).max(1);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / n as f64
    }
}

/// Affine map between natural-log power and normalized spectrogram units:
/// `ln(log_floor) -> -1`, `ln(ref_power) -> +1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogScale {
    pub log_floor: f64,
    pub ref_power: f64,
}

impl LogScale {
    fn bounds(&self) -> (f64, f64) {
        (libm::log(self.log_floor), libm::log(self.ref_power))
    }

    pub fn normalize(&self, power: f64) -> f32 {
        let (lo, hi) = self.bounds();
        let l = libm::log(power.max(self.log_floor));
        let v = 2.0 * (l - lo) / (hi - lo) - 1.0;
        v.clamp(-1.0, 1.0) as f32
    }

    /// Power represented by a normalized value.
    pub fn denormalize(&self, value: f32) -> f64 {
        let (lo, hi) = self.bounds();
        libm::exp(lo + (value as f64 + 1.0) * 0.5 * (hi - lo))
    }

    /// Power with the floor subtracted, so floor-valued cells resynthesize
    /// as silence.
    pub fn denormalize_above_floor(&self, value: f32) -> f64 {
        (self.denormalize(value) - self.log_floor).max(0.0)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, evenly spaced on the mel scale.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    /// Row-major `n_mels x n_bins`.
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
    /// Row-major `n_bins x n_mels`, minimum-norm least-squares inverse.
    pinv: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &DspConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.n_bins();
        let n_mels = cfg.n_mels;
        let lo = hz_to_mel(cfg.fmin);
        let hi = hz_to_mel(cfg.fmax);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut any = false;
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let up = (f - left) / (center - left);
                let down = (right - f) / (right - center);
                let w = up.min(down).max(0.0);
                if w > 0.0 {
                    any = true;
                }
                weights[m * n_bins + k] = w;
            }
            if !any {
                return Err(CoreError::Config(format!(
                    "mel band {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; lower n_mels or raise n_fft"
                )));
            }
        }
        let w = DMatrix::from_row_slice(n_mels, n_bins, &weights);
        let pinv_m = w
            .pseudo_inverse(1e-10)
            .map_err(|e| CoreError::Config(format!("filterbank inversion failed: {e}")))?;
        let mut pinv = vec![0.0; n_bins * n_mels];
        for k in 0..n_bins {
            for m in 0..n_mels {
                pinv[k * n_mels + m] = pinv_m[(k, m)];
            }
        }
        Ok(Self {
            n_mels,
            n_bins,
            weights,
            centers_hz: edges[1..=n_mels].to_vec(),
            pinv,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.centers_hz[m]
    }

    /// Band whose center frequency is closest to `hz`.
    pub fn nearest_band(&self, hz: f64) -> usize {
        let mut best = 0;
        for m in 1..self.n_mels {
            if (self.centers_hz[m] - hz).abs() < (self.centers_hz[best] - hz).abs() {
                best = m;
            }
        }
        best
    }

    /// Mel-band power for one linear power frame.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate().take(self.n_mels) {
            *o = self.row(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }

    /// Linear power frame from mel power via the pseudo-inverse, clipped at 0.
    pub fn invert(&self, mel_power: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate().take(self.n_bins) {
            let row = &self.pinv[k * self.n_mels..(k + 1) * self.n_mels];
            let v: f64 = row.iter().zip(mel_power).map(|(a, b)| a * b).sum();
            *o = v.max(0.0);
        }
    }

    /// Non-negative linear power frame whose mel projection matches
    /// `mel_power`: the clipped pseudo-inverse refined by `iters`
    /// multiplicative least-squares updates.
    pub fn invert_nonneg(&self, mel_power: &[f64], out: &mut [f64], iters: usize) {
        self.invert(mel_power, out);
        let peak = out.iter().fold(0.0f64, |a, &b| a.max(b));
        if peak <= 0.0 {
            return;
        }
        // Updates cannot revive exact zeros, so start every bin slightly above.
        let lift = peak * 1e-6;
        out.iter_mut().for_each(|o| *o += lift);
        let mut numer = vec![0.0; self.n_bins];
        self.apply_transpose(mel_power, &mut numer);
        let mut proj = vec![0.0; self.n_mels];
        let mut denom = vec![0.0; self.n_bins];
        for _ in 0..iters {
            self.apply(out, &mut proj);
            self.apply_transpose(&proj, &mut denom);
            for ((o, n), d) in out.iter_mut().zip(&numer).zip(&denom) {
                if *d > 0.0 {
                    *o *= n.max(0.0) / d;
                }
            }
        }
    }

    fn apply_transpose(&self, mel: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (m, &v) in mel.iter().enumerate().take(self.n_mels) {
            for (o, w) in out.iter_mut().zip(self.row(m)) {
                *o += w * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trip() {
        for hz in [0.0, 100.0, 440.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * libm::log10(2.0)).abs() < 1e-12);
    }

    #[test]
    fn default_config_is_valid() {
        DspConfig::default().validate().unwrap();
        for bad in [
            DspConfig {
                hop: 2048,
                ..DspConfig::default()
            },
            DspConfig {
                fmax: 20_000.0,
                ..DspConfig::default()
            },
            DspConfig {
                n_mels: 4,
                ..DspConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn filterbank_rows_are_nonnegative_and_contiguous() {
        let fb = MelFilterbank::new(&DspConfig::default()).unwrap();
        for m in 0..fb.n_mels() {
            let row = fb.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            let nz: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
            assert!(!nz.is_empty());
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len(), "band {m} has a gap");
        }
        // Centers increase monotonically.
        for m in 1..fb.n_mels() {
            assert!(fb.center_hz(m) > fb.center_hz(m - 1));
        }
    }

    #[test]
    fn pseudo_inverse_is_a_right_inverse() {
        let fb = MelFilterbank::new(&DspConfig::default()).unwrap();
        // W W+ = I because W has full row rank.
        let mel: Vec<f64> = (0..fb.n_mels()).map(|m| 1.0 + (m % 5) as f64).collect();
        let mut lin = vec![0.0; fb.n_bins()];
        // Skip the clip for this check.
        for k in 0..fb.n_bins() {
            lin[k] = (0..fb.n_mels()).map(|m| fb.pinv[k * fb.n_mels + m] * mel[m]).sum();
        }
        let mut back = vec![0.0; fb.n_mels()];
        fb.apply(&lin, &mut back);
        for (a, b) in back.iter().zip(&mel) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn nonneg_inverse_beats_clipped_pinv() {
        let fb = MelFilterbank::new(&DspConfig::default()).unwrap();
        // A sparse, tonal spectrum: the plain pseudo-inverse rings negative.
        let mut truth = vec![0.0; fb.n_bins()];
        for k in [12, 40, 41, 97, 230] {
            truth[k] = 1.0;
        }
        let mut mel = vec![0.0; fb.n_mels()];
        fb.apply(&truth, &mut mel);
        let residual = |lin: &[f64]| {
            let mut back = vec![0.0; fb.n_mels()];
            fb.apply(lin, &mut back);
            back.iter().zip(&mel).map(|(a, b)| (a - b).abs()).sum::<f64>()
        };
        let mut clipped = vec![0.0; fb.n_bins()];
        fb.invert(&mel, &mut clipped);
        let mut refined = vec![0.0; fb.n_bins()];
        fb.invert_nonneg(&mel, &mut refined, 50);
        assert!(refined.iter().all(|&v| v >= 0.0));
        assert!(residual(&refined) < 0.25 * residual(&clipped));

        let mut zeros = vec![1.0; fb.n_bins()];
        fb.invert_nonneg(&vec![0.0; fb.n_mels()], &mut zeros, 10);
        assert!(zeros.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_scale_endpoints() {
        let s = DspConfig::default().scale();
        assert_eq!(s.normalize(0.0), -1.0);
        assert_eq!(s.normalize(1e-5), -1.0);
        assert_eq!(s.normalize(1.0), 1.0);
        assert_eq!(s.normalize(10.0), 1.0);
        assert!((s.denormalize(s.normalize(0.01)) - 0.01).abs() < 1e-8);
        assert_eq!(s.denormalize_above_floor(-1.0), 0.0);
    }

    #[test]
    fn crop_pads_with_floor() {
        let m = MelSpectrogram::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let c = m.crop(2, 3);
        assert_eq!(c.values(), &[0.3, -1.0, -1.0, 0.6, -1.0, -1.0]);
        assert!(MelSpectrogram::new(2, 2, vec![0.0; 3]).is_err());
        assert!(MelSpectrogram::new(1, 1, vec![f32::NAN]).is_err());
    }
}
