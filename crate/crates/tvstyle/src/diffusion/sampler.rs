use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tvstyle_core::NoiseSchedule;

use super::unet::UNet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    /// Only the deterministic sampler (0) is supported.
    pub eta: f64,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            eta: 0.0,
            guidance_scale: 4.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if self.n_steps == 0 || self.n_steps > num_steps {
            return Err(Error::Config(format!(
                "sampler n_steps = {} must lie in [1, {num_steps}]",
                self.n_steps
            )));
        }
        if self.eta != 0.0 {
            return Err(Error::Config(format!("sampler eta must be 0, got {}", self.eta)));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Config(format!(
                "guidance scale must be a finite value >= 0, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// Standard normal tensor drawn from a ChaCha8 stream seeded with `seed`.
pub fn gaussian(shape: &[usize], seed: u64, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_from(&mut rng, shape, dtype, dev)
}

pub fn gaussian_from(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, dev)?.to_dtype(dtype)?)
}

fn check_t(s: &NoiseSchedule, t: usize) -> Result<()> {
    if t > s.num_steps() {
        return Err(Error::Input(format!("timestep {t} exceeds T = {}", s.num_steps())));
    }
    Ok(())
}

/// `sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps`; `t = 0` returns `z0` itself.
pub fn q_sample(s: &NoiseSchedule, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    check_t(s, t)?;
    if z0.dims() != eps.dims() {
        return Err(Error::Input(format!(
            "noise shape {:?} vs latent {:?}",
            eps.dims(),
            z0.dims()
        )));
    }
    if t == 0 {
        return Ok(z0.clone());
    }
    let ab = s.alpha_bar(t);
    Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Per-sample forward diffusion: row `i` of `z0` is noised to `ts[i]`.
pub fn q_sample_batch(s: &NoiseSchedule, z0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
    let n = z0.dim(0)?;
    if ts.len() != n || z0.dims() != eps.dims() {
        return Err(Error::Input("q_sample_batch: mismatched batch".into()));
    }
    for &t in ts {
        check_t(s, t)?;
    }
    let a: Vec<f64> = ts.iter().map(|&t| s.alpha_bar(t).sqrt()).collect();
    let b: Vec<f64> = ts.iter().map(|&t| (1.0 - s.alpha_bar(t)).sqrt()).collect();
    let col = |v: Vec<f64>| -> Result<Tensor> {
        let mut shape = vec![1usize; z0.rank()];
        shape[0] = n;
        Ok(Tensor::from_vec(v, shape, z0.device())?.to_dtype(z0.dtype())?)
    };
    Ok((z0.broadcast_mul(&col(a)?)? + eps.broadcast_mul(&col(b)?)?)?)
}

fn timesteps(n: usize, t: usize) -> Vec<usize> {
    vec![t; n]
}

/// Classifier-free guided noise prediction `eps_u + scale * (eps_c - eps_u)`
/// for a batch `z_t: (B, C, H, W)`. Conditions are `(1 or B, L, d)`. Scales
/// 0 and 1 evaluate only the branch they select.
pub fn guided_eps(unet: &UNet, z_t: &Tensor, t: usize, cond: &Tensor, uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if !(scale >= 0.0) {
        return Err(Error::Input(format!("guidance scale must be >= 0, got {scale}")));
    }
    let n = z_t.dim(0)?;
    if scale == 0.0 {
        return unet.forward(z_t, &timesteps(n, t), uncond);
    }
    if scale == 1.0 {
        return unet.forward(z_t, &timesteps(n, t), cond);
    }
    let expand = |c: &Tensor| -> Result<Tensor> {
        let (cb, l, d) = c.dims3()?;
        Ok(if cb == n {
            c.clone()
        } else {
            c.broadcast_as((n, l, d))?.contiguous()?
        })
    };
    let x = Tensor::cat(&[z_t, z_t], 0)?;
    let c = Tensor::cat(&[&expand(cond)?, &expand(uncond)?], 0)?;
    let eps = unet.forward(&x, &timesteps(2 * n, t), &c)?;
    let eps_c = eps.narrow(0, 0, n)?;
    let eps_u = eps.narrow(0, n, n)?;
    Ok((&eps_u + ((eps_c - &eps_u)? * scale)?)?)
}

/// Deterministic DDIM update from `t` to `t_prev < t`.
pub fn ddim_step(s: &NoiseSchedule, z_t: &Tensor, eps_hat: &Tensor, t: usize, t_prev: usize) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::Input(format!(
            "ddim step must move backwards, got {t} -> {t_prev}"
        )));
    }
    check_t(s, t)?;
    let ab_prev = s.alpha_bar(t_prev);
    let x0 = predict_x0(s, z_t, eps_hat, t)?;
    Ok(((x0 * ab_prev.sqrt())? + (eps_hat * (1.0 - ab_prev).sqrt())?)?)
}

/// Clean-latent estimate `(z_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)`.
pub fn predict_x0(s: &NoiseSchedule, z_t: &Tensor, eps_hat: &Tensor, t: usize) -> Result<Tensor> {
    check_t(s, t)?;
    let ab = s.alpha_bar(t);
    Ok(((z_t - (eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
}

/// Runs the DDIM chain from `t_start` to 0 on a batch of latents. The
/// condition is re-queried at every step so timestep-dependent embeddings
/// follow the trajectory. Returns the final latents (detached).
pub fn ddim_sample(
    unet: &UNet,
    s: &NoiseSchedule,
    z_start: &Tensor,
    t_start: usize,
    cond: &mut dyn FnMut(usize) -> Result<Tensor>,
    uncond: &Tensor,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    check_t(s, t_start)?;
    if cfg.n_steps == 0 {
        return Err(Error::Config("sampler n_steps must be at least 1".into()));
    }
    if cfg.eta != 0.0 {
        return Err(Error::Config("only eta = 0 is supported".into()));
    }
    let (grid, clipped) = s.ddim_timesteps(t_start, cfg.n_steps)?;
    if clipped {
        log::warn!(
            "requested {} DDIM steps but only {t_start} timesteps lie below t_start; using {t_start}",
            cfg.n_steps
        );
    }
    let mut z = z_start.detach();
    for w in grid.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let c = cond(t)?.detach();
        let eps = guided_eps(unet, &z, t, &c, uncond, cfg.guidance_scale)?;
        z = ddim_step(s, &z, &eps, t, t_prev)?.detach();
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::scaled_linear(256, 1e-4, 0.02).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap()
    }

    #[test]
    fn q_sample_at_zero_is_identity_and_zero_noise_scales() {
        let s = schedule();
        let z0 = gaussian(&[2, 1, 4, 4], 1, DType::F64, &Device::Cpu).unwrap();
        let eps = gaussian(&[2, 1, 4, 4], 2, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(values(&q_sample(&s, &z0, 0, &eps).unwrap()), values(&z0));
        let zero = eps.zeros_like().unwrap();
        let out = values(&q_sample(&s, &z0, 100, &zero).unwrap());
        let k = s.alpha_bar(100).sqrt();
        for (o, z) in out.iter().zip(values(&z0)) {
            assert!((o - k * z).abs() < 1e-15);
        }
        assert!(q_sample(&s, &z0, 257, &eps).is_err());
    }

    #[test]
    fn batched_q_sample_matches_scalar_form() {
        let s = schedule();
        let z0 = gaussian(&[3, 1, 2, 2], 5, DType::F64, &Device::Cpu).unwrap();
        let eps = gaussian(&[3, 1, 2, 2], 6, DType::F64, &Device::Cpu).unwrap();
        let ts = [0usize, 40, 256];
        let batch = q_sample_batch(&s, &z0, &ts, &eps).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let one = q_sample(&s, &z0.narrow(0, i, 1).unwrap(), t, &eps.narrow(0, i, 1).unwrap()).unwrap();
            let a = values(&one);
            let b = values(&batch.narrow(0, i, 1).unwrap());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn ddim_step_inverts_forward_noise() {
        let s = schedule();
        let z0 = gaussian(&[1, 1, 8, 8], 3, DType::F64, &Device::Cpu).unwrap();
        let eps = gaussian(&[1, 1, 8, 8], 4, DType::F64, &Device::Cpu).unwrap();
        for t in [1, 64, 128, 256] {
            let zt = q_sample(&s, &z0, t, &eps).unwrap();
            let x0 = predict_x0(&s, &zt, &eps, t).unwrap();
            for (a, b) in values(&x0).iter().zip(values(&z0)) {
                assert!((a - b).abs() < 1e-10, "t={t}");
            }
            // Stepping to 0 with the true noise lands on z0 too.
            let z = ddim_step(&s, &zt, &eps, t, 0).unwrap();
            for (a, b) in values(&z).iter().zip(values(&z0)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert!(ddim_step(&s, &z0, &eps, 5, 5).is_err());
    }

    #[test]
    fn ddim_step_matches_core_arithmetic() {
        let s = schedule();
        let z = gaussian(&[1, 1, 3, 3], 8, DType::F64, &Device::Cpu).unwrap();
        let e = gaussian(&[1, 1, 3, 3], 9, DType::F64, &Device::Cpu).unwrap();
        let ours = values(&ddim_step(&s, &z, &e, 200, 150).unwrap());
        let core = s.ddim_step(&values(&z), &values(&e), 200, 150).unwrap();
        for (a, b) in ours.iter().zip(&core) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_is_seeded() {
        let a = values(&gaussian(&[16], 7, DType::F32, &Device::Cpu).unwrap());
        let b = values(&gaussian(&[16], 7, DType::F32, &Device::Cpu).unwrap());
        let c = values(&gaussian(&[16], 8, DType::F32, &Device::Cpu).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sampler_config_validation() {
        let mut c = SamplerConfig::default();
        c.validate(256).unwrap();
        c.eta = 0.5;
        assert!(c.validate(256).is_err());
        c.eta = 0.0;
        c.guidance_scale = -1.0;
        assert!(c.validate(256).is_err());
        c.guidance_scale = 3.0;
        c.n_steps = 0;
        assert!(c.validate(256).is_err());
    }

    #[test]
    fn guidance_combines_branches() {
        let m = crate::testutil::live_model(2);
        let z = gaussian(&[2, 1, 16, 16], 1, DType::F32, &Device::Cpu).unwrap();
        let cond = m.condition("a bell melody", 0, None).unwrap();
        let uncond = m.uncond().unwrap();
        let t = 120;
        let e_c = values(
            &m.unet
                .forward(
                    &z,
                    &[t, t],
                    &cond.broadcast_as((2, 8, 16)).unwrap().contiguous().unwrap(),
                )
                .unwrap(),
        );
        let e_u = values(
            &m.unet
                .forward(
                    &z,
                    &[t, t],
                    &uncond.broadcast_as((2, 8, 16)).unwrap().contiguous().unwrap(),
                )
                .unwrap(),
        );
        assert_eq!(values(&guided_eps(&m.unet, &z, t, &cond, &uncond, 0.0).unwrap()), e_u);
        assert_eq!(values(&guided_eps(&m.unet, &z, t, &cond, &uncond, 1.0).unwrap()), e_c);
        let g = values(&guided_eps(&m.unet, &z, t, &cond, &uncond, 4.0).unwrap());
        assert!(e_c.iter().zip(&e_u).any(|(c, u)| (c - u).abs() > 1e-4));
        for ((g, c), u) in g.iter().zip(&e_c).zip(&e_u) {
            assert!((g - (u + 4.0 * (c - u))).abs() < 1e-4, "{g} vs {}", u + 4.0 * (c - u));
        }
        assert!(guided_eps(&m.unet, &z, t, &cond, &uncond, -1.0).is_err());
    }

    #[test]
    fn sampling_from_zero_is_identity_and_repeatable() {
        let m = crate::testutil::live_model(2);
        let z = gaussian(&[1, 1, 16, 16], 3, DType::F32, &Device::Cpu).unwrap();
        let uncond = m.uncond().unwrap();
        let mut cond = |t: usize| m.condition("a pluck melody", t, None);
        let cfg = SamplerConfig {
            n_steps: 10,
            ..SamplerConfig::default()
        };
        let same = ddim_sample(&m.unet, &m.schedule, &z, 0, &mut cond, &uncond, &cfg).unwrap();
        assert_eq!(values(&same), values(&z));
        let a = values(&ddim_sample(&m.unet, &m.schedule, &z, 200, &mut cond, &uncond, &cfg).unwrap());
        let b = values(&ddim_sample(&m.unet, &m.schedule, &z, 200, &mut cond, &uncond, &cfg).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, values(&z));
    }
}
