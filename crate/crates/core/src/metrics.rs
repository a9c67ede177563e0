//! Spectral similarity scores.
//!
//! `content_preservation` correlates the time courses of frame energy and
//! spectral centroid, so it tracks melody and rhythm while ignoring timbre.
//! `style_fit` compares frame-order-free statistics (average spectral shape
//! and band covariance), so it tracks timbre and texture while ignoring
//! melody.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;

use crate::error::{CoreError, Result};
use crate::mel::{LogScale, MelSpectrogram};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Cosine similarity, clamped to [-1, 1]; `cosine(a, a) == 1` exactly.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::Shape(format!("{} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        return Err(CoreError::Degenerate("cosine of a zero vector".into()));
    }
    Ok((dot / libm::sqrt(aa * bb)).clamp(-1.0, 1.0))
}

/// Pearson correlation; errors when either sequence is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::Shape(format!("{} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(CoreError::Degenerate("correlation needs two samples".into()));
    }
    let ma = mean(a);
    let mb = mean(b);
    let ca: Vec<f64> = a.iter().map(|x| x - ma).collect();
    let cb: Vec<f64> = b.iter().map(|x| x - mb).collect();
    cosine(&ca, &cb).map_err(|_| CoreError::Degenerate("correlation undefined for a constant feature sequence".into()))
}

/// Per-frame RMS energy and energy-weighted mean band index.
fn structure_features(m: &MelSpectrogram, frames: usize, scale: &LogScale) -> (Vec<f64>, Vec<f64>) {
    let mut energy = Vec::with_capacity(frames);
    let mut centroid = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for b in 0..m.n_mels() {
            let p = scale.denormalize(m.get(b, f));
            sum += p;
            weighted += b as f64 * p;
        }
        energy.push(libm::sqrt(sum / m.n_mels() as f64));
        centroid.push(weighted / sum);
    }
    (energy, centroid)
}

/// Structure similarity in [-1, 1]; both inputs are cropped to the shorter
/// frame count.
pub fn content_preservation(out: &MelSpectrogram, content: &MelSpectrogram, scale: &LogScale) -> Result<f64> {
    if out.n_mels() != content.n_mels() {
        return Err(CoreError::Shape(format!(
            "{} vs {} mel bands",
            out.n_mels(),
            content.n_mels()
        )));
    }
    let frames = out.n_frames().min(content.n_frames());
    let (e_out, c_out) = structure_features(out, frames, scale);
    let (e_con, c_con) = structure_features(content, frames, scale);
    let r_e = pearson(&e_out, &e_con)?;
    let r_c = pearson(&c_out, &c_con)?;
    Ok((0.5 * r_e + 0.5 * r_c).clamp(-1.0, 1.0))
}

/// Band-mean-removed long-term average spectrum.
fn spectral_shape(m: &MelSpectrogram) -> Vec<f64> {
    let n = m.n_frames() as f64;
    let mut l: Vec<f64> = (0..m.n_mels())
        .map(|b| (0..m.n_frames()).map(|f| m.get(b, f) as f64).sum::<f64>() / n)
        .collect();
    let mu = mean(&l);
    l.iter_mut().for_each(|x| *x -= mu);
    l
}

/// Unit-trace covariance of mean-removed frames, flattened row-major.
fn band_covariance(m: &MelSpectrogram) -> Result<Vec<f64>> {
    let bands = m.n_mels();
    let frames = m.n_frames();
    let means: Vec<f64> = (0..bands)
        .map(|b| (0..frames).map(|f| m.get(b, f) as f64).sum::<f64>() / frames as f64)
        .collect();
    let centered: Vec<f64> = (0..bands)
        .flat_map(|b| {
            let mu = means[b];
            (0..frames).map(move |f| m.get(b, f) as f64 - mu)
        })
        .collect();
    let mut g = vec![0.0; bands * bands];
    for i in 0..bands {
        let ri = &centered[i * frames..(i + 1) * frames];
        for j in i..bands {
            let rj = &centered[j * frames..(j + 1) * frames];
            let v: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
            g[i * bands + j] = v;
            g[j * bands + i] = v;
        }
    }
    let trace: f64 = (0..bands).map(|i| g[i * bands + i]).sum();
    if trace <= 0.0 {
        return Err(CoreError::Degenerate("spectrogram has zero variance over time".into()));
    }
    g.iter_mut().for_each(|x| *x /= trace);
    Ok(g)
}

/// Texture similarity in [-1, 1]; invariant to frame order.
pub fn style_fit(out: &MelSpectrogram, style: &MelSpectrogram) -> Result<f64> {
    if out.n_mels() != style.n_mels() {
        return Err(CoreError::Shape(format!(
            "{} vs {} mel bands",
            out.n_mels(),
            style.n_mels()
        )));
    }
    let l = cosine(&spectral_shape(out), &spectral_shape(style))
        .map_err(|_| CoreError::Degenerate("flat average spectrum".into()))?;
    let g = cosine(&band_covariance(out)?, &band_covariance(style)?)?;
    Ok((0.5 * l + 0.5 * g).clamp(-1.0, 1.0))
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_mean_ci<R: RngCore>(values: &[f64], resamples: usize, level: f64, rng: &mut R) -> (f64, f64) {
    let n = values.len();
    if n == 0 || resamples == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let s: f64 = (0..n).map(|_| values[(rng.next_u64() % n as u64) as usize]).sum();
            s / n as f64
        })
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let alpha = (1.0 - level) / 2.0;
    let idx = |q: f64| ((q * (resamples - 1) as f64).round() as usize).min(resamples - 1);
    (means[idx(alpha)], means[idx(1.0 - alpha)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mel::DspConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mel(seed: u64, frames: usize) -> MelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..16 * frames).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        MelSpectrogram::new(16, frames, vals).unwrap()
    }

    #[test]
    fn self_scores_are_exactly_one() {
        let scale = DspConfig::default().scale();
        for seed in 0..20 {
            let m = random_mel(seed, 24);
            assert_eq!(content_preservation(&m, &m, &scale).unwrap(), 1.0);
            assert_eq!(style_fit(&m, &m).unwrap(), 1.0);
        }
    }

    #[test]
    fn constant_spectrogram_is_degenerate() {
        let scale = DspConfig::default().scale();
        let flat = MelSpectrogram::filled(16, 10, -1.0);
        let m = random_mel(3, 10);
        assert!(matches!(
            content_preservation(&flat, &m, &scale),
            Err(CoreError::Degenerate(_))
        ));
        assert!(matches!(style_fit(&flat, &m), Err(CoreError::Degenerate(_))));
    }

    #[test]
    fn pearson_matches_textbook_formula() {
        let a = [1.0, 2.0, 3.0, 5.0, 8.0];
        let b = [2.0, 1.0, 4.0, 3.0, 7.0];
        // Oracle computed with the sum-of-products form.
        let n = 5.0;
        let sa: f64 = a.iter().sum();
        let sb: f64 = b.iter().sum();
        let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        let r = (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt());
        assert!((pearson(&a, &b).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_interval_brackets_the_mean() {
        let xs: Vec<f64> = (0..100).map(|i| (i % 10) as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (lo, hi) = bootstrap_mean_ci(&xs, 2000, 0.95, &mut rng);
        let m = mean(&xs);
        assert!(lo < m && m < hi);
        assert!(hi - lo < 2.0);
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(bootstrap_mean_ci(&xs, 2000, 0.95, &mut rng2), (lo, hi));
    }

    proptest::proptest! {
        #[test]
        fn scores_bounded(seed_a in 0u64..1000, seed_b in 0u64..1000) {
            let scale = DspConfig::default().scale();
            let a = random_mel(seed_a, 12);
            let b = random_mel(seed_b, 12);
            let cp = content_preservation(&a, &b, &scale).unwrap();
            let sf = style_fit(&a, &b).unwrap();
            proptest::prop_assert!((-1.0..=1.0).contains(&cp));
            proptest::prop_assert!((-1.0..=1.0).contains(&sf));
        }

        #[test]
        fn style_fit_ignores_frame_order(seed in 0u64..1000, rot in 1usize..11) {
            let a = random_mel(seed, 12);
            let b = random_mel(seed + 1, 12);
            // Rotate frames of `a`.
            let mut vals = alloc::vec::Vec::new();
            for band in 0..16 {
                for f in 0..12 {
                    vals.push(a.get(band, (f + rot) % 12));
                }
            }
            let a_rot = MelSpectrogram::new(16, 12, vals).unwrap();
            let x = style_fit(&a, &b).unwrap();
            let y = style_fit(&a_rot, &b).unwrap();
            proptest::prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
