//! Sinusoidal timestep features.

use alloc::vec::Vec;

/// `[sin(t * w_0), .., sin(t * w_{h-1}), cos(t * w_0), .., cos(t * w_{h-1})]`
/// with `w_i = 10000^(-i / h)` and `h = dim / 2`.
pub fn sinusoidal(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| libm::exp(-libm::log(10_000.0) * i as f64 / half.max(1) as f64))
        .collect();
    out.extend(freqs.iter().map(|w| libm::sin(t * w)));
    out.extend(freqs.iter().map(|w| libm::cos(t * w)));
    out.resize(dim, 0.0);
    out
}
