use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::attention::attention;
use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Builder, Init, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TveConfig {
    /// Number of groups the embedding is split into for attention.
    pub groups: usize,
    pub t_dim: usize,
    pub hidden: usize,
    /// Number of stacked self/cross attention pairs.
    pub n_pairs: usize,
}

impl Default for TveConfig {
    fn default() -> Self {
        Self {
            groups: 8,
            t_dim: 128,
            hidden: 128,
            n_pairs: 1,
        }
    }
}

#[derive(Debug, Clone)]
struct AttnPair {
    self_q: Tensor,
    self_k: Tensor,
    self_v: Tensor,
    cross_q: Tensor,
    cross_k: Tensor,
    cross_v: Tensor,
}

/// Trainable initial embedding of the placeholder token.
#[derive(Debug, Clone)]
pub struct Placeholder {
    pub v_o: Tensor,
    pub init_token: String,
}

impl Placeholder {
    /// Registers `v_o` under the builder's scope, initialized from `init`
    /// unless it already exists in the store.
    pub fn new(b: &mut Builder, init: &Tensor, init_token: &str) -> Result<Self> {
        Ok(Self {
            v_o: b.param_from("v_o", init)?,
            init_token: init_token.to_string(),
        })
    }
}

/// Time-varying encoder: maps a diffusion timestep to a placeholder
/// embedding via an MLP offset followed by grouped self/cross attention.
#[derive(Debug, Clone)]
pub struct Tve {
    cfg: TveConfig,
    d: usize,
    num_steps: usize,
    fc1: Linear,
    fc2: Linear,
    pairs: Vec<AttnPair>,
}

impl Tve {
    pub fn new(b: &mut Builder, d: usize, num_steps: usize, cfg: &TveConfig) -> Result<Self> {
        if cfg.groups == 0 || !d.is_multiple_of(cfg.groups) {
            return Err(Error::Config(format!(
                "tve.groups = {} must divide the embedding width {d}",
                cfg.groups
            )));
        }
        if cfg.n_pairs == 0 {
            return Err(Error::Config("tve.n_pairs must be at least 1".into()));
        }
        let gd = d / cfg.groups;
        let fc1 = Linear::new(&mut b.pp("fc1"), cfg.t_dim, cfg.hidden)?;
        let fc2 = Linear::with_init(&mut b.pp("fc2"), cfg.hidden, d, Init::Zeros, true)?;
        let mut pairs = Vec::new();
        for i in 0..cfg.n_pairs {
            let mut pb = b.pp(&format!("pair{i}"));
            let mut m = |name: &str| pb.param(name, &[gd, gd], Init::Identity);
            pairs.push(AttnPair {
                self_q: m("self_q")?,
                self_k: m("self_k")?,
                self_v: m("self_v")?,
                cross_q: m("cross_q")?,
                cross_k: m("cross_k")?,
                cross_v: m("cross_v")?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            d,
            num_steps,
            fc1,
            fc2,
            pairs,
        })
    }

    pub fn config(&self) -> &TveConfig {
        &self.cfg
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// Embeddings for several timesteps at once, shape `(n, d)`.
    pub fn forward_many(&self, ts: &[usize], p: &Placeholder) -> Result<Tensor> {
        if let Some(bad) = ts.iter().find(|&&t| t > self.num_steps) {
            return Err(Error::Input(format!("timestep {bad} outside [0, {}]", self.num_steps)));
        }
        let n = ts.len();
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let te = timestep_embedding(&tf, self.cfg.t_dim, p.v_o.dtype(), p.v_o.device())?;
        let offset = self.fc2.forward(&self.fc1.forward(&te)?.silu()?)?;
        let g = self.cfg.groups;
        let gd = self.d / g;
        let mut v0 = offset.broadcast_add(&p.v_o)?.reshape((n, g, gd))?;
        for pair in &self.pairs {
            let proj = |x: &Tensor, w: &Tensor| -> Result<Tensor> {
                Ok(x.reshape((n * g, gd))?.matmul(w)?.reshape((n, g, gd))?)
            };
            let v1 = attention(
                &proj(&v0, &pair.self_q)?,
                &proj(&v0, &pair.self_k)?,
                &proj(&v0, &pair.self_v)?,
            )?;
            let out = attention(
                &proj(&v1, &pair.cross_q)?,
                &proj(&v0, &pair.cross_k)?,
                &proj(&v0, &pair.cross_v)?,
            )?;
            v0 = out;
        }
        Ok(v0.reshape((n, self.d))?)
    }

    /// Placeholder embedding at timestep `t`, shape `(d)`.
    pub fn forward(&self, t: usize, p: &Placeholder) -> Result<Tensor> {
        Ok(self.forward_many(&[t], p)?.squeeze(0)?)
    }
}
