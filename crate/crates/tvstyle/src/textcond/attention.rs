use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::softmax_last;

/// Attention weights `softmax(Q Kᵀ / sqrt(d_k))` with an optional additive
/// mask broadcast over the leading dimensions.
pub fn attention_weights(q: &Tensor, k: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let dq = q.dim(D::Minus1)?;
    let dk = k.dim(D::Minus1)?;
    if dq != dk || q.rank() != k.rank() || q.rank() < 2 {
        return Err(Error::Input(format!(
            "attention shape mismatch: Q {:?}, K {:?}",
            q.dims(),
            k.dims()
        )));
    }
    let logits = (q.matmul(&k.transpose(D::Minus2, D::Minus1)?.contiguous()?)? / (dk as f64).sqrt())?;
    let logits = match mask {
        Some(m) => logits.broadcast_add(m)?,
        None => logits,
    };
    softmax_last(&logits)
}

/// Scaled dot-product attention over the last two dimensions:
/// `Q: (.., n_q, d_k)`, `K: (.., n_k, d_k)`, `V: (.., n_k, d_v)`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    masked_attention(q, k, v, None)
}

pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let nk = k.dim(D::Minus2)?;
    if v.dim(D::Minus2)? != nk || v.rank() != k.rank() {
        return Err(Error::Input(format!(
            "attention shape mismatch: K {:?}, V {:?}",
            k.dims(),
            v.dims()
        )));
    }
    Ok(attention_weights(q, k, mask)?.matmul(&v.contiguous()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| StandardNormal.sample(&mut *rng)).collect())
            .collect()
    }

    fn t(m: &[Vec<f64>]) -> Tensor {
        Tensor::new(m.to_vec(), &Device::Cpu).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = t(&[vec![1.0, -2.0], vec![0.3, 0.4], vec![5.0, 5.0]]);
        let k = t(&[vec![0.7, 0.1]]);
        let v = t(&[vec![2.0, 3.0, -1.0]]);
        let out = attention(&q, &k, &v).unwrap().to_vec2::<f64>().unwrap();
        for row in out {
            assert_eq!(row, vec![2.0, 3.0, -1.0]);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let q = t(&[vec![0.9, -0.4]]);
        let k = t(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        let v = t(&[vec![1.0, 0.0], vec![3.0, 4.0]]);
        let out = attention(&q, &k, &v).unwrap().to_vec2::<f64>().unwrap();
        assert!((out[0][0] - 2.0).abs() < 1e-12 && (out[0][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn matches_elementwise_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (n, d) = (3, 4);
        let (q, k, v) = (mat(n, d, &mut rng), mat(n, d, &mut rng), mat(n, d, &mut rng));
        let w = attention_weights(&t(&q), &t(&k), None)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        let out = attention(&t(&q), &t(&k), &t(&v)).unwrap().to_vec2::<f64>().unwrap();
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..n {
                assert!((w[i][j] - logits[j].exp() / z).abs() < 1e-12);
            }
            assert!((w[i].iter().sum::<f64>() - 1.0).abs() < 1e-6);
            // Convex combination: each coordinate within the values' range.
            for c in 0..d {
                let lo = v.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
                let hi = v.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
                assert!(out[i][c] >= lo - 1e-12 && out[i][c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let a = t(&[vec![1.0, 2.0]]);
        let b = t(&[vec![1.0, 2.0, 3.0]]);
        assert!(attention(&a, &b, &a).is_err());
        let two = t(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(attention(&a, &a, &two).is_err());
    }
}
