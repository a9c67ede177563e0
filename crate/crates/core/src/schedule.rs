//! Discrete-time variance schedule, closed-form forward diffusion and the
//! deterministic (eta = 0) DDIM update.
//!
//! Timesteps are 1-based: `alpha_bar(0) == 1` denotes the clean sample and
//! `alpha_bar(T)` the most heavily noised one.

use alloc::format;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{CoreError, Result};

/// Reference training length the standard linear betas are quoted for.
const REFERENCE_STEPS: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    /// `betas[t]` for `t in 1..=T`; index 0 is unused and set to 0.
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t in 0..=T`, with `alpha_bars[0] == 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` at t = 1 to `beta_end` at t = T.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps < 2 {
            return Err(CoreError::Config(format!(
                "schedule needs at least 2 steps, got {num_steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(CoreError::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut betas = Vec::with_capacity(num_steps + 1);
        let mut alpha_bars = Vec::with_capacity(num_steps + 1);
        betas.push(0.0);
        alpha_bars.push(1.0);
        let span = (num_steps - 1) as f64;
        let mut acc = 1.0f64;
        for t in 1..=num_steps {
            let beta = beta_start + (beta_end - beta_start) * (t - 1) as f64 / span;
            acc *= 1.0 - beta;
            betas.push(beta);
            alpha_bars.push(acc);
        }
        Ok(Self {
            beta_start,
            beta_end,
            betas,
            alpha_bars,
        })
    }

    /// The usual 1e-4 .. 0.02 linear range, rescaled so a `num_steps`-long
    /// chain destroys the signal as thoroughly as the 1000-step original.
    pub fn scaled_linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let k = REFERENCE_STEPS / num_steps as f64;
        Self::linear(num_steps, beta_start * k, beta_end * k)
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            return Err(CoreError::Input(format!(
                "timestep {t} exceeds schedule length {}",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// `sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * eps`.
    pub fn q_sample<F: Float>(&self, z0: &[F], t: usize, eps: &[F]) -> Result<Vec<F>> {
        self.check_t(t)?;
        same_len(z0.len(), eps.len())?;
        let ab = self.alpha_bars[t];
        let a = F::from(ab.sqrt()).unwrap();
        let b = F::from((1.0 - ab).sqrt()).unwrap();
        Ok(z0.iter().zip(eps).map(|(&z, &e)| a * z + b * e).collect())
    }

    /// Clean-sample estimate implied by a noise prediction at step `t`.
    pub fn predict_x0<F: Float>(&self, z_t: &[F], eps_hat: &[F], t: usize) -> Result<Vec<F>> {
        self.check_t(t)?;
        same_len(z_t.len(), eps_hat.len())?;
        let ab = self.alpha_bars[t];
        let a = F::from(ab.sqrt()).unwrap();
        let b = F::from((1.0 - ab).sqrt()).unwrap();
        Ok(z_t.iter().zip(eps_hat).map(|(&z, &e)| (z - b * e) / a).collect())
    }

    /// One deterministic DDIM transition from `t` to `t_prev < t`.
    pub fn ddim_step<F: Float>(&self, z_t: &[F], eps_hat: &[F], t: usize, t_prev: usize) -> Result<Vec<F>> {
        if t_prev >= t {
            return Err(CoreError::Input(format!(
                "ddim step must move backwards in time, got {t} -> {t_prev}"
            )));
        }
        self.check_t(t)?;
        ddim_update(z_t, eps_hat, self.alpha_bars[t], self.alpha_bars[t_prev])
    }

    /// Uniform descending grid `t_start = s_0 > s_1 > ... > s_k = 0` with
    /// `k = min(n_steps, t_start)`. The flag reports whether `n_steps` had
    /// to be clipped.
    pub fn ddim_timesteps(&self, t_start: usize, n_steps: usize) -> Result<(Vec<usize>, bool)> {
        self.check_t(t_start)?;
        if n_steps == 0 {
            return Err(CoreError::Config("ddim needs at least one step".into()));
        }
        let k = n_steps.min(t_start);
        let clipped = n_steps > t_start && t_start > 0;
        if k == 0 {
            return Ok((alloc::vec![0], clipped));
        }
        let grid = (0..=k)
            .map(|i| {
                let x = t_start as f64 * (k - i) as f64 / k as f64;
                libm::round(x) as usize
            })
            .collect();
        Ok((grid, clipped))
    }
}

/// DDIM (eta = 0) update between two cumulative signal levels:
/// `x0 = (z - sqrt(1 - ab) * eps) / sqrt(ab)`, then
/// `sqrt(ab_prev) * x0 + sqrt(1 - ab_prev) * eps`.
pub fn ddim_update<F: Float>(z_t: &[F], eps_hat: &[F], ab: f64, ab_prev: f64) -> Result<Vec<F>> {
    same_len(z_t.len(), eps_hat.len())?;
    let a = F::from(ab.sqrt()).unwrap();
    let b = F::from((1.0 - ab).sqrt()).unwrap();
    let a_prev = F::from(ab_prev.sqrt()).unwrap();
    let b_prev = F::from((1.0 - ab_prev).sqrt()).unwrap();
    Ok(z_t
        .iter()
        .zip(eps_hat)
        .map(|(&z, &e)| a_prev * ((z - b * e) / a) + b_prev * e)
        .collect())
}

/// `t_p = round_half_up(T * strength)`.
pub fn strength_to_timestep(strength: f64, num_steps: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(CoreError::Input(format!("strength must lie in [0, 1], got {strength}")));
    }
    Ok(libm::floor(num_steps as f64 * strength + 0.5) as usize)
}

/// Classifier-free guidance: `eps_u + scale * (eps_c - eps_u)`.
pub fn guided_combine<F: Float>(eps_uncond: &[F], eps_cond: &[F], scale: F) -> Result<Vec<F>> {
    same_len(eps_uncond.len(), eps_cond.len())?;
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(&u, &c)| u + scale * (c - u))
        .collect())
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CoreError::Shape(format!("length {a} vs {b}")));
    }
    Ok(())
}
