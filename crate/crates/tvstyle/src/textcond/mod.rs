//! Caption tokenization, the text encoder, and the time-varying encoder
//! for the placeholder token.

pub mod attention;
mod encoder;
mod tve;
mod vocab;

use candle_core::Tensor;

use crate::error::{Error, Result};

pub use attention::{attention, attention_weights};
pub use encoder::{TextEncoder, TextEncoderConfig};
pub use tve::{Placeholder, Tve, TveConfig};
pub use vocab::{Vocabulary, BOS, EOS, PAD, PLACEHOLDER};

/// Token used to initialize the placeholder embedding.
pub const INIT_TOKEN: &str = "music";

/// Per-token condition vectors for one caption.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    /// `(L, d)`
    pub values: Tensor,
    pub timestep_dependent: bool,
}

impl ConditionSet {
    /// `(1, L, d)` view for batched denoiser calls.
    pub fn batched(&self) -> Result<Tensor> {
        Ok(self.values.unsqueeze(0)?)
    }
}

/// The learned pseudo-word: a placeholder embedding, optionally made
/// timestep-dependent by a TVE. Without a TVE the embedding is fixed.
#[derive(Debug, Clone)]
pub struct PseudoWord {
    pub placeholder: Placeholder,
    pub tve: Option<Tve>,
}

impl PseudoWord {
    /// Embedding substituted for the placeholder token at timestep `t`.
    pub fn embedding(&self, t: usize) -> Result<Tensor> {
        match &self.tve {
            Some(tve) => tve.forward(t, &self.placeholder),
            None => Ok(self.placeholder.v_o.clone()),
        }
    }
}

/// Encodes a padded id sequence. Every occurrence of the placeholder id is
/// replaced by the pseudo-word's embedding at `t` before the transformer.
pub fn encode_text(
    ids: &[usize],
    t: usize,
    pseudo: Option<&PseudoWord>,
    enc: &TextEncoder,
    vocab: &Vocabulary,
) -> Result<ConditionSet> {
    let star = vocab.placeholder();
    let positions: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == star)
        .map(|(i, _)| i)
        .collect();
    if positions.is_empty() {
        let values = enc.forward(&enc.embed(ids, &[])?.unsqueeze(0)?)?.squeeze(0)?;
        return Ok(ConditionSet {
            values,
            timestep_dependent: false,
        });
    }
    let pw = pseudo
        .ok_or_else(|| Error::Usage("caption contains the placeholder but no pseudo-word was supplied".into()))?;
    let v = pw.embedding(t)?;
    let overrides: Vec<(usize, Tensor)> = positions.iter().map(|&p| (p, v.clone())).collect();
    let values = enc.forward(&enc.embed(ids, &overrides)?.unsqueeze(0)?)?.squeeze(0)?;
    Ok(ConditionSet {
        values,
        timestep_dependent: pw.tve.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::default_styles;
    use crate::nn::ParamStore;
    use candle_core::{DType, Var};

    struct Fixture {
        store: ParamStore,
        enc: TextEncoder,
        vocab: Vocabulary,
        pw: PseudoWord,
    }

    fn fixture(dtype: DType, n_pairs: usize) -> Fixture {
        let vocab = Vocabulary::for_styles(&default_styles()).unwrap();
        let mut store = ParamStore::new(dtype, 3);
        let enc = TextEncoder::new(&mut store.root().pp("text"), vocab.len(), &TextEncoderConfig::default()).unwrap();
        let init = enc.token_embedding(vocab.id(INIT_TOKEN).unwrap()).unwrap();
        let placeholder = Placeholder::new(&mut store.root().pp("placeholder"), &init, INIT_TOKEN).unwrap();
        let cfg = TveConfig {
            n_pairs,
            ..TveConfig::default()
        };
        let tve = Tve::new(&mut store.root().pp("tve"), 128, 256, &cfg).unwrap();
        Fixture {
            store,
            enc,
            vocab,
            pw: PseudoWord {
                placeholder,
                tve: Some(tve),
            },
        }
    }

    fn vec_of(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap()
    }

    #[test]
    fn zero_initialized_tve_is_timestep_independent() {
        let f = fixture(DType::F32, 1);
        let tve = f.pw.tve.as_ref().unwrap();
        let a = vec_of(&tve.forward(0, &f.pw.placeholder).unwrap());
        let b = vec_of(&tve.forward(256, &f.pw.placeholder).unwrap());
        assert_eq!(a.len(), 128);
        assert_eq!(a, b);
        assert!(tve.forward(257, &f.pw.placeholder).is_err());
    }

    #[test]
    fn output_width_is_preserved_for_any_group_count() {
        for g in [1, 2, 4, 8, 16, 32] {
            let mut s = ParamStore::new(DType::F32, 0);
            let cfg = TveConfig {
                groups: g,
                ..TveConfig::default()
            };
            let tve = Tve::new(&mut s.root().pp("tve"), 128, 256, &cfg).unwrap();
            let init = Tensor::ones(128, DType::F32, s.device()).unwrap();
            let p = Placeholder::new(&mut s.root().pp("placeholder"), &init, "music").unwrap();
            assert_eq!(tve.forward(10, &p).unwrap().dims(), &[128]);
        }
        let mut s = ParamStore::new(DType::F32, 0);
        let cfg = TveConfig {
            groups: 3,
            ..TveConfig::default()
        };
        assert!(Tve::new(&mut s.root(), 128, 256, &cfg).is_err());
    }

    #[test]
    fn placeholder_starts_from_the_init_token() {
        let f = fixture(DType::F32, 1);
        let want = vec_of(&f.enc.token_embedding(f.vocab.id(INIT_TOKEN).unwrap()).unwrap());
        assert_eq!(vec_of(&f.pw.placeholder.v_o), want);
    }

    #[test]
    fn captions_without_placeholder_ignore_t() {
        let f = fixture(DType::F32, 1);
        let ids = f.vocab.tokenize("a bell melody", 8).unwrap();
        let a = encode_text(&ids, 3, Some(&f.pw), &f.enc, &f.vocab).unwrap();
        let b = encode_text(&ids, 200, None, &f.enc, &f.vocab).unwrap();
        assert_eq!(vec_of(&a.values), vec_of(&b.values));
        assert!(!a.timestep_dependent);
        assert_eq!(a.values.dims(), &[8, 128]);
        let empty = encode_text(&f.vocab.tokenize("", 8).unwrap(), 0, None, &f.enc, &f.vocab).unwrap();
        assert_eq!(empty.values.dims(), &[8, 128]);
    }

    #[test]
    fn placeholder_requires_a_pseudo_word() {
        let f = fixture(DType::F32, 1);
        let ids = f.vocab.tokenize("*", 8).unwrap();
        assert!(matches!(
            encode_text(&ids, 3, None, &f.enc, &f.vocab),
            Err(Error::Usage(_))
        ));
        let mut bad = ids.clone();
        bad[1] = 99;
        assert!(matches!(
            encode_text(&bad, 3, Some(&f.pw), &f.enc, &f.vocab),
            Err(Error::Tokenize(_))
        ));
        let c = encode_text(&ids, 3, Some(&f.pw), &f.enc, &f.vocab).unwrap();
        assert!(c.timestep_dependent);
    }

    #[test]
    fn trained_tve_makes_conditions_depend_on_t() {
        let f = fixture(DType::F32, 1);
        // Perturb the zeroed output layer as training would.
        let w = f.store.var("tve.fc2.w").unwrap();
        w.set(&w.as_tensor().ones_like().unwrap().affine(0.05, 0.0).unwrap())
            .unwrap();
        let ids = f.vocab.tokenize("*", 8).unwrap();
        let a = vec_of(&encode_text(&ids, 10, Some(&f.pw), &f.enc, &f.vocab).unwrap().values);
        let b = vec_of(&encode_text(&ids, 240, Some(&f.pw), &f.enc, &f.vocab).unwrap().values);
        // Row 0 is BOS, which the causal encoder never lets see the placeholder.
        assert_eq!(a[..128], b[..128]);
        assert!(a[128..256].iter().zip(&b[128..256]).any(|(x, y)| (x - y).abs() > 1e-4));
    }

    /// Central-difference check of every TVE matrix at 64-bit precision.
    #[test]
    fn tve_gradients_match_finite_differences() {
        let f = fixture(DType::F64, 2);
        // Random probe point: give the zeroed layer non-trivial values.
        let w = f.store.var("tve.fc2.w").unwrap();
        let g = |shape: &[usize], seed| crate::diffusion::gaussian(shape, seed, DType::F64, f.store.device()).unwrap();
        let noise = (g(w.dims(), 1) * 0.1).unwrap();
        w.set(&noise).unwrap();
        for (i, name) in ["tve.pair0.self_q", "tve.pair1.cross_k"].into_iter().enumerate() {
            let v = f.store.var(name).unwrap();
            let p = (v.as_tensor() + (g(v.dims(), 2 + i as u64) * 0.2).unwrap()).unwrap();
            v.set(&p).unwrap();
        }
        let tve = f.pw.tve.as_ref().unwrap();
        let r = g(&[128], 9);
        let t = 77;
        let loss = || -> f64 {
            tve.forward(t, &f.pw.placeholder)
                .unwrap()
                .mul(&r)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let out = tve
            .forward(t, &f.pw.placeholder)
            .unwrap()
            .mul(&r)
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = out.backward().unwrap();
        let names: Vec<String> = f
            .store
            .names()
            .filter(|n| n.starts_with("tve.") || n.starts_with("placeholder."))
            .map(str::to_string)
            .collect();
        assert!(names.len() >= 4 + 12);
        let eps = 1e-6;
        for name in names {
            let var: &Var = f.store.var(&name).unwrap();
            let g = vec_of(grads.get(var.as_tensor()).unwrap());
            let base = vec_of(var.as_tensor());
            let shape = var.dims().to_vec();
            let n = base.len();
            for i in (0..n).step_by((n / 12).max(1)) {
                let mut plus = base.clone();
                plus[i] += eps;
                var.set(&Tensor::from_vec(plus, shape.as_slice(), f.store.device()).unwrap())
                    .unwrap();
                let lp = loss();
                let mut minus = base.clone();
                minus[i] -= eps;
                var.set(&Tensor::from_vec(minus, shape.as_slice(), f.store.device()).unwrap())
                    .unwrap();
                let lm = loss();
                var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), f.store.device()).unwrap())
                    .unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
                assert!(rel < 1e-4, "{name}[{i}]: autodiff {} vs fd {fd} (rel {rel})", g[i]);
            }
        }
    }
}
