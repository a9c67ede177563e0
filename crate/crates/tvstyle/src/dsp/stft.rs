use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Centered short-time Fourier transform with a periodic Hann window.
///
/// Frame `i` covers input samples `[i * hop - n_fft / 2, i * hop + n_fft / 2)`
/// (zero outside the signal), so a signal of `n` samples yields
/// `n / hop + 1` frames.
pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let window = (0..n_fft)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos())
            .collect();
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn window_sum(&self) -> f64 {
        self.window.iter().sum()
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples / self.hop + 1
    }

    /// One-sided spectra, `n_frames` rows of `n_bins` values.
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<Complex64>> {
        let n_frames = self.n_frames(x.len());
        let half = (self.n_fft / 2) as isize;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        (0..n_frames)
            .map(|f| {
                let start = (f * self.hop) as isize - half;
                for (i, slot) in buf.iter_mut().enumerate() {
                    let idx = start + i as isize;
                    let s = if idx >= 0 && (idx as usize) < x.len() {
                        x[idx as usize]
                    } else {
                        0.0
                    };
                    *slot = Complex64::new(s * self.window[i], 0.0);
                }
                self.forward.process_with_scratch(&mut buf, &mut scratch);
                buf[..self.n_bins()].to_vec()
            })
            .collect()
    }

    /// Least-squares inverse (weighted overlap-add) producing `len` samples.
    pub fn inverse(&self, frames: &[Vec<Complex64>], len: usize) -> Vec<f64> {
        let half = (self.n_fft / 2) as isize;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let n_bins = self.n_bins();
        for (f, spec) in frames.iter().enumerate() {
            buf[..n_bins].copy_from_slice(&spec[..n_bins]);
            for k in n_bins..self.n_fft {
                buf[k] = spec[self.n_fft - k].conj();
            }
            // DC and Nyquist bins of a real signal carry no imaginary part.
            buf[0].im = 0.0;
            buf[n_bins - 1].im = 0.0;
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = (f * self.hop) as isize - half;
            for i in 0..self.n_fft {
                let idx = start + i as isize;
                if idx >= 0 && (idx as usize) < len {
                    let w = self.window[i];
                    out[idx as usize] += w * buf[i].re / self.n_fft as f64;
                    norm[idx as usize] += w * w;
                }
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-10 {
                *o /= n;
            }
        }
        out
    }
}
