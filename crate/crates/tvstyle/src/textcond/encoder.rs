use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::attention::masked_attention;
use crate::error::{Error, Result};
use crate::nn::{Builder, Init, LayerNorm, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub mlp_hidden: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            max_len: 8,
            mlp_hidden: 256,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "text.n_heads = {} must divide text.d_model = {}",
                self.n_heads, self.d_model
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config("text.max_len must be at least 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Causal pre-norm transformer over token embeddings.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    vocab_size: usize,
    tok: Tensor,
    pos: Tensor,
    layers: Vec<EncoderLayer>,
    ln_f: LayerNorm,
    mask: Tensor,
}

impl TextEncoder {
    pub fn new(b: &mut Builder, vocab_size: usize, cfg: &TextEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tok = b.param("tok", &[vocab_size, d], Init::Normal(1.0))?;
        let pos = b.param("pos", &[cfg.max_len, d], Init::Normal(0.1))?;
        let mut layers = Vec::new();
        for i in 0..cfg.n_layers {
            let mut lb = b.pp(&format!("layer{i}"));
            layers.push(EncoderLayer {
                ln1: LayerNorm::new(&mut lb.pp("ln1"), d)?,
                q: Linear::new(&mut lb.pp("q"), d, d)?,
                k: Linear::new(&mut lb.pp("k"), d, d)?,
                v: Linear::new(&mut lb.pp("v"), d, d)?,
                o: Linear::new(&mut lb.pp("o"), d, d)?,
                ln2: LayerNorm::new(&mut lb.pp("ln2"), d)?,
                fc1: Linear::new(&mut lb.pp("fc1"), d, cfg.mlp_hidden)?,
                fc2: Linear::new(&mut lb.pp("fc2"), cfg.mlp_hidden, d)?,
            });
        }
        let ln_f = LayerNorm::new(&mut b.pp("ln_f"), d)?;
        let l = cfg.max_len;
        let mask: Vec<f64> = (0..l * l).map(|i| if i % l > i / l { -1e9 } else { 0.0 }).collect();
        let mask = Tensor::from_vec(mask, (l, l), &b.device())?.to_dtype(b.dtype())?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab_size,
            tok,
            pos,
            layers,
            ln_f,
            mask,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dtype(&self) -> DType {
        self.tok.dtype()
    }

    pub fn device(&self) -> &Device {
        self.tok.device()
    }

    /// Table embedding of one token, shape `(d)`.
    pub fn token_embedding(&self, id: usize) -> Result<Tensor> {
        self.check_range(&[id])?;
        Ok(self.tok.get(id)?)
    }

    fn check_range(&self, ids: &[usize]) -> Result<()> {
        if let Some(bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Tokenize(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        self.check_range(ids)?;
        if ids.len() != self.cfg.max_len {
            return Err(Error::Tokenize(format!(
                "expected {} token ids, got {}",
                self.cfg.max_len,
                ids.len()
            )));
        }
        Ok(())
    }

    /// Token-table rows for a padded id sequence, shape `(L, d)`. Rows whose
    /// position appears in `overrides` are replaced by the given vectors.
    pub fn embed(&self, ids: &[usize], overrides: &[(usize, Tensor)]) -> Result<Tensor> {
        self.check_ids(ids)?;
        let idx = Tensor::from_vec(
            ids.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            ids.len(),
            self.device(),
        )?;
        let rows = self.tok.index_select(&idx, 0)?;
        if overrides.is_empty() {
            return Ok(rows);
        }
        let mut parts = Vec::new();
        let mut start = 0;
        let mut sorted: Vec<&(usize, Tensor)> = overrides.iter().collect();
        sorted.sort_by_key(|(p, _)| *p);
        for (p, v) in sorted {
            if *p > start {
                parts.push(rows.narrow(0, start, p - start)?);
            }
            parts.push(v.reshape((1, self.cfg.d_model))?);
            start = p + 1;
        }
        if start < ids.len() {
            parts.push(rows.narrow(0, start, ids.len() - start)?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Runs the transformer on embeddings `(B, L, d)`.
    pub fn forward(&self, emb: &Tensor) -> Result<Tensor> {
        let (bsz, l, d) = emb.dims3()?;
        let h = self.cfg.n_heads;
        let dh = d / h;
        let mut x = emb.broadcast_add(&self.pos)?;
        for layer in &self.layers {
            let n = layer.ln1.forward(&x)?;
            let split =
                |t: Tensor| -> Result<Tensor> { Ok(t.reshape((bsz, l, h, dh))?.transpose(1, 2)?.contiguous()?) };
            let q = split(layer.q.forward(&n)?)?;
            let k = split(layer.k.forward(&n)?)?;
            let v = split(layer.v.forward(&n)?)?;
            let a = masked_attention(&q, &k, &v, Some(&self.mask))?;
            let a = a.transpose(1, 2)?.contiguous()?.reshape((bsz, l, d))?;
            x = (x + layer.o.forward(&a)?)?;
            let n = layer.ln2.forward(&x)?;
            x = (&x + layer.fc2.forward(&layer.fc1.forward(&n)?.silu()?)?)?;
        }
        self.ln_f.forward(&x)
    }

    /// Encodes a batch of plain captions (no placeholder), `(B, L, d)`.
    pub fn encode_batch(&self, batch: &[Vec<usize>]) -> Result<Tensor> {
        let embs = batch
            .iter()
            .map(|ids| self.embed(ids, &[]))
            .collect::<Result<Vec<_>>>()?;
        self.forward(&Tensor::stack(&embs, 0)?)
    }
}
