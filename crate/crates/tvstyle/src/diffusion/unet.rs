use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{channel_add, silu, timestep_embedding, upsample2x, Builder, Conv2d, GroupNorm, Init, Linear};
use crate::textcond::attention::attention;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Widths at full, half and quarter resolution.
    pub channels: [usize; 3],
    pub groups: usize,
    pub t_dim: usize,
    pub temb_dim: usize,
    pub cond_dim: usize,
    pub attn_heads: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: [32, 64, 128],
            groups: 8,
            t_dim: 64,
            temb_dim: 128,
            cond_dim: 128,
            attn_heads: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        for &c in &self.channels {
            if c == 0 || c % self.groups != 0 {
                return Err(Error::Config(format!(
                    "unet.groups = {} must divide every width in {:?}",
                    self.groups, self.channels
                )));
            }
        }
        if !self.channels[2].is_multiple_of(self.attn_heads) {
            return Err(Error::Config("unet.attn_heads must divide the bottleneck width".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(b: &mut Builder, c_in: usize, c_out: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            gn1: GroupNorm::new(&mut b.pp("gn1"), cfg.groups, c_in)?,
            conv1: Conv2d::new(&mut b.pp("conv1"), c_in, c_out, 3, 1)?,
            temb: Linear::new(&mut b.pp("temb"), cfg.temb_dim, c_out)?,
            gn2: GroupNorm::new(&mut b.pp("gn2"), cfg.groups, c_out)?,
            conv2: Conv2d::new(&mut b.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&mut b.pp("skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.gn1.forward(x)?)?)?;
        let h = channel_add(&h, &self.temb.forward(temb)?)?;
        let h = self.conv2.forward(&silu(&self.gn2.forward(&h)?)?)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((s + h)?)
    }
}

#[derive(Debug, Clone)]
struct CrossAttention {
    gn: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new(b: &mut Builder, c: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            gn: GroupNorm::new(&mut b.pp("gn"), cfg.groups, c)?,
            q: Linear::no_bias(&mut b.pp("q"), c, c, Init::Uniform(1.0 / (c as f64).sqrt()))?,
            k: Linear::no_bias(
                &mut b.pp("k"),
                cfg.cond_dim,
                c,
                Init::Uniform(1.0 / (cfg.cond_dim as f64).sqrt()),
            )?,
            v: Linear::no_bias(
                &mut b.pp("v"),
                cfg.cond_dim,
                c,
                Init::Uniform(1.0 / (cfg.cond_dim as f64).sqrt()),
            )?,
            o: Linear::new(&mut b.pp("o"), c, c)?,
            heads: cfg.attn_heads,
        })
    }

    /// `x: (B, C, H, W)`, `cond: (B, L, d)`.
    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let l = cond.dim(1)?;
        let hd = c / self.heads;
        let tokens = self
            .gn
            .forward(x)?
            .reshape((n, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let q = self
            .q
            .forward(&tokens)?
            .reshape((n, h * w, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?;
        let k = self
            .k
            .forward(cond)?
            .reshape((n, l, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?;
        let v = self
            .v
            .forward(cond)?
            .reshape((n, l, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?;
        let a = attention(&q, &k, &v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, h * w, c))?;
        let out = self.o.forward(&a)?.transpose(1, 2)?.reshape((n, c, h, w))?;
        Ok((x + out)?)
    }
}

/// Three-level U-Net noise predictor with timestep injection in every
/// residual block and cross-attention onto the condition set at the
/// bottleneck.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    t_fc1: Linear,
    t_fc2: Linear,
    conv_in: Conv2d,
    down0: ResBlock,
    pool0: Conv2d,
    down1: ResBlock,
    pool1: Conv2d,
    mid0: ResBlock,
    attn: CrossAttention,
    mid1: ResBlock,
    up1: ResBlock,
    up0: ResBlock,
    gn_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(b: &mut Builder, cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let [c0, c1, c2] = cfg.channels;
        Ok(Self {
            t_fc1: Linear::new(&mut b.pp("t_fc1"), cfg.t_dim, cfg.temb_dim)?,
            t_fc2: Linear::new(&mut b.pp("t_fc2"), cfg.temb_dim, cfg.temb_dim)?,
            conv_in: Conv2d::new(&mut b.pp("conv_in"), cfg.in_channels, c0, 3, 1)?,
            down0: ResBlock::new(&mut b.pp("down0"), c0, c0, cfg)?,
            pool0: Conv2d::new(&mut b.pp("pool0"), c0, c0, 3, 2)?,
            down1: ResBlock::new(&mut b.pp("down1"), c0, c1, cfg)?,
            pool1: Conv2d::new(&mut b.pp("pool1"), c1, c1, 3, 2)?,
            mid0: ResBlock::new(&mut b.pp("mid0"), c1, c2, cfg)?,
            attn: CrossAttention::new(&mut b.pp("attn"), c2, cfg)?,
            mid1: ResBlock::new(&mut b.pp("mid1"), c2, c2, cfg)?,
            up1: ResBlock::new(&mut b.pp("up1"), c2 + c1, c1, cfg)?,
            up0: ResBlock::new(&mut b.pp("up0"), c1 + c0, c0, cfg)?,
            gn_out: GroupNorm::new(&mut b.pp("gn_out"), cfg.groups, c0)?,
            conv_out: Conv2d::zeroed(&mut b.pp("conv_out"), c0, cfg.in_channels, 3)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Predicts the noise in `x: (B, C, H, W)` at per-sample timesteps `ts`
    /// given conditions `cond: (B or 1, L, d)`.
    pub fn forward(&self, x: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        if ts.len() != n {
            return Err(Error::Input(format!("{} timesteps for batch of {n}", ts.len())));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Input(format!("spatial size {h}x{w} must be divisible by 4")));
        }
        let (cb, l, d) = cond.dims3()?;
        let cond = if cb == n {
            cond.clone()
        } else if cb == 1 {
            cond.broadcast_as((n, l, d))?.contiguous()?
        } else {
            return Err(Error::Input(format!("condition batch {cb} vs input batch {n}")));
        };
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let te = timestep_embedding(&tf, self.cfg.t_dim, x.dtype(), x.device())?;
        let temb = self.t_fc2.forward(&self.t_fc1.forward(&te)?.silu()?)?.silu()?;

        let h0 = self.conv_in.forward(x)?;
        let s0 = self.down0.forward(&h0, &temb)?;
        let s1 = self.down1.forward(&self.pool0.forward(&s0)?, &temb)?;
        let m = self.mid0.forward(&self.pool1.forward(&s1)?, &temb)?;
        let m = self.attn.forward(&m, &cond)?;
        let m = self.mid1.forward(&m, &temb)?;
        let u1 = Tensor::cat(&[&upsample2x(&m)?, &s1], 1)?;
        let u1 = self.up1.forward(&u1, &temb)?;
        let u0 = Tensor::cat(&[&upsample2x(&u1)?, &s0], 1)?;
        let u0 = self.up0.forward(&u0, &temb)?;
        self.conv_out.forward(&silu(&self.gn_out.forward(&u0)?)?)
    }
}

/// Per-element mean squared error.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device, Var};

    use super::*;
    use crate::nn::ParamStore;

    fn tiny() -> UNetConfig {
        UNetConfig {
            channels: [4, 8, 8],
            groups: 2,
            t_dim: 8,
            temb_dim: 8,
            cond_dim: 8,
            attn_heads: 2,
            ..UNetConfig::default()
        }
    }

    fn randn(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        crate::diffusion::gaussian(shape, seed, dtype, &Device::Cpu).unwrap()
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
    fn output_matches_input_shape_and_starts_at_zero() {
        let mut s = ParamStore::new(DType::F32, 0);
        let net = UNet::new(&mut s.root(), &tiny()).unwrap();
        let x = randn(&[3, 1, 8, 12], 1, DType::F32);
        let cond = randn(&[1, 5, 8], 2, DType::F32);
        let y = net.forward(&x, &[0, 10, 256], &cond).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert!(values(&y).iter().all(|&v| v == 0.0));
        assert!(net.forward(&x, &[1, 2], &cond).is_err());
        let odd = Tensor::zeros((1, 1, 6, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(net.forward(&odd, &[1], &cond).is_err());
    }

    #[test]
    fn default_size_fits_the_toy_budget() {
        let mut s = ParamStore::new(DType::F32, 0);
        UNet::new(&mut s.root().pp("unet"), &UNetConfig::default()).unwrap();
        let n = s.num_params();
        assert!((500_000..=4_000_000).contains(&n), "{n} parameters");
    }

    #[test]
    fn config_validation() {
        let bad = UNetConfig {
            channels: [30, 64, 128],
            ..UNetConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = UNetConfig {
            attn_heads: 3,
            ..UNetConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn conditioning_reaches_the_output() {
        let mut s = ParamStore::new(DType::F32, 4);
        let net = UNet::new(&mut s.root(), &tiny()).unwrap();
        let w = s.var("conv_out.w").unwrap();
        w.set(&(randn(w.dims(), 3, DType::F32) * 0.5).unwrap()).unwrap();
        let x = randn(&[1, 1, 8, 8], 4, DType::F32);
        let c1 = randn(&[1, 3, 8], 5, DType::F32);
        let c2 = randn(&[1, 3, 8], 6, DType::F32);
        let a = values(&net.forward(&x, &[50], &c1).unwrap());
        let b = values(&net.forward(&x, &[50], &c2).unwrap());
        let t = values(&net.forward(&x, &[200], &c1).unwrap());
        let diff = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff(&a, &b) > 1e-4);
        assert!(diff(&a, &t) > 1e-4);
    }

    /// Autodiff against central differences on 100 weights spread over
    /// every parameter tensor, at 64-bit precision.
    #[test]
    fn gradients_match_finite_differences() {
        let mut s = ParamStore::new(DType::F64, 9);
        let net = UNet::new(&mut s.root(), &tiny()).unwrap();
        // Move off the zero-initialized output layer so every weight matters.
        let w = s.var("conv_out.w").unwrap();
        w.set(&(randn(w.dims(), 7, DType::F64) * 0.3).unwrap()).unwrap();
        let dev = Device::Cpu;
        let x = randn(&[2, 1, 8, 8], 8, DType::F64);
        let cond = randn(&[2, 3, 8], 9, DType::F64);
        let r = randn(&[2, 1, 8, 8], 10, DType::F64);
        let ts = [17, 190];
        let loss_t = || net.forward(&x, &ts, &cond).unwrap().mul(&r).unwrap().sum_all().unwrap();
        let grads = loss_t().backward().unwrap();

        let vars: Vec<(String, Var)> = s.vars().map(|(n, v)| (n.to_string(), v.clone())).collect();
        let total: usize = vars.iter().map(|(_, v)| v.elem_count()).sum();
        let stride = total / 100;
        let eps = 1e-6;
        let mut checked = 0;
        let mut offset = 0;
        for (name, var) in &vars {
            let g = values(grads.get(var.as_tensor()).unwrap());
            let base = values(var.as_tensor());
            let shape = var.dims().to_vec();
            for i in (0..base.len()).filter(|i| (offset + i) % stride == 0) {
                let eval = |delta: f64| {
                    let mut p = base.clone();
                    p[i] += delta;
                    var.set(&Tensor::from_vec(p, shape.as_slice(), &dev).unwrap()).unwrap();
                    loss_t().to_scalar::<f64>().unwrap()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &dev).unwrap())
                    .unwrap();
                let scale = fd.abs().max(g[i].abs());
                let rel = if scale < 1e-7 { 0.0 } else { (fd - g[i]).abs() / scale };
                assert!(rel < 1e-4, "{name}[{i}]: autodiff {} vs fd {fd} (rel {rel})", g[i]);
                checked += 1;
            }
            offset += base.len();
        }
        assert!(checked >= 100, "{checked} weights checked");
    }
}
