//! Per-channel and elementwise ops on `(N, C, ...)` tensors with hand-written
//! backward passes. Candle's generic broadcast backward reduces over
//! non-trailing axes with strided loops, which dominated training time.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Result, Shape, Tensor};

trait Float: Copy + 'static + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> + std::ops::AddAssign {
    fn zero() -> Self;
    fn silu_parts(self) -> (Self, Self);
}

impl Float for f32 {
    fn zero() -> Self {
        0.0
    }
    /// `(silu(v), d silu / dv)`.
    fn silu_parts(self) -> (Self, Self) {
        let s = 1.0 / (1.0 + (-self).exp());
        (self * s, s * (1.0 + self * (1.0 - s)))
    }
}

impl Float for f64 {
    fn zero() -> Self {
        0.0
    }
    fn silu_parts(self) -> (Self, Self) {
        let s = 1.0 / (1.0 + (-self).exp());
        (self * s, s * (1.0 + self * (1.0 - s)))
    }
}

fn slice<'a, T>(s: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("fused op expects contiguous operands"),
    }
}

macro_rules! unary {
    ($s:expr, $l:expr, |$a:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(x) => {
                let $a = slice(x, $l)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(x) => {
                let $a = slice(x, $l)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("fused op supports f32 or f64 only"),
        }
    };
}

macro_rules! binary {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                let ($a, $b) = (slice(x, $l1)?, slice(y, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                let ($a, $b) = (slice(x, $l1)?, slice(y, $l2)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("fused op supports matching f32 or f64 operands only"),
        }
    };
}

/// Layout of a `(n, c, inner)` tensor with a per-channel operand that is
/// either `(c)` (shared) or `(n, c)` (per sample).
#[derive(Debug, Clone, Copy)]
struct Chan {
    n: usize,
    c: usize,
    inner: usize,
    per_sample: bool,
}

impl Chan {
    fn new(x: &Tensor, p: &Tensor) -> Result<Self> {
        let dims = x.dims();
        if dims.len() < 2 {
            candle_core::bail!("channel op needs rank >= 2, got {dims:?}");
        }
        let (n, c) = (dims[0], dims[1]);
        let inner = dims[2..].iter().product();
        let per_sample = match p.dims() {
            [k] if *k == c => false,
            [a, b] if *a == n && *b == c => true,
            d => candle_core::bail!("channel operand {d:?} does not fit input {dims:?}"),
        };
        Ok(Self {
            n,
            c,
            inner,
            per_sample,
        })
    }

    fn param_index(&self, i: usize, j: usize) -> usize {
        if self.per_sample {
            i * self.c + j
        } else {
            j
        }
    }

    fn param_len(&self) -> usize {
        if self.per_sample {
            self.n * self.c
        } else {
            self.c
        }
    }

    fn param_shape(&self) -> Shape {
        if self.per_sample {
            Shape::from((self.n, self.c))
        } else {
            Shape::from(self.c)
        }
    }

    fn map<T: Float>(&self, x: &[T], p: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len());
        for i in 0..self.n {
            for j in 0..self.c {
                let v = p[self.param_index(i, j)];
                let base = (i * self.c + j) * self.inner;
                out.extend(x[base..base + self.inner].iter().map(|&a| f(a, v)));
            }
        }
        out
    }

    /// Sums `f(a[k], b[k])` over every axis except the channel (and batch,
    /// if per sample).
    fn reduce<T: Float>(&self, a: &[T], b: Option<&[T]>, f: impl Fn(T, T) -> T) -> Vec<T> {
        let mut out = vec![T::zero(); self.param_len()];
        for i in 0..self.n {
            for j in 0..self.c {
                let base = (i * self.c + j) * self.inner;
                let r = base..base + self.inner;
                let mut acc = T::zero();
                match b {
                    Some(b) => {
                        for (&u, &v) in a[r.clone()].iter().zip(&b[r]) {
                            acc += f(u, v);
                        }
                    }
                    None => {
                        for &u in &a[r] {
                            acc += u;
                        }
                    }
                }
                out[self.param_index(i, j)] += acc;
            }
        }
        out
    }
}

struct ChannelAdd(Chan);
struct ChannelMul(Chan);
struct ChannelSum(Chan);
struct ChannelDot(Chan);

impl CustomOp2 for ChannelAdd {
    fn name(&self) -> &'static str {
        "channel-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = binary!(s1, l1, s2, l2, |x, p| self.0.map(x, p, |a, b| a + b));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, p: &Tensor, _res: &Tensor, gy: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let gx = x.track_op().then(|| gy.clone());
        let gp = if p.track_op() {
            Some(gy.contiguous()?.apply_op1_no_bwd(&ChannelSum(self.0))?)
        } else {
            None
        };
        Ok((gx, gp))
    }
}

impl CustomOp2 for ChannelMul {
    fn name(&self) -> &'static str {
        "channel-mul"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = binary!(s1, l1, s2, l2, |x, p| self.0.map(x, p, |a, b| a * b));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, p: &Tensor, _res: &Tensor, gy: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let gy = gy.contiguous()?;
        let gx = if x.track_op() {
            Some(gy.apply_op2_no_bwd(p, &ChannelMul(self.0))?)
        } else {
            None
        };
        let gp = if p.track_op() {
            Some(x.apply_op2_no_bwd(&gy, &ChannelDot(self.0))?)
        } else {
            None
        };
        Ok((gx, gp))
    }
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = unary!(s, l, |g| self.0.reduce(g, None, |a, _| a));
        Ok((out, self.0.param_shape()))
    }
}

impl CustomOp2 for ChannelDot {
    fn name(&self) -> &'static str {
        "channel-dot"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = binary!(s1, l1, s2, l2, |x, g| self.0.reduce(x, Some(g), |a, b| a * b));
        Ok((out, self.0.param_shape()))
    }
}

/// `x + p` where `x: (N, C, ...)` and `p` is `(C)` or `(N, C)`.
pub fn channel_add(x: &Tensor, p: &Tensor) -> Result<Tensor> {
    let ch = Chan::new(x, p)?;
    x.contiguous()?.apply_op2(&p.contiguous()?, ChannelAdd(ch))
}

/// `x * p` where `x: (N, C, ...)` and `p` is `(C)` or `(N, C)`.
pub fn channel_mul(x: &Tensor, p: &Tensor) -> Result<Tensor> {
    let ch = Chan::new(x, p)?;
    x.contiguous()?.apply_op2(&p.contiguous()?, ChannelMul(ch))
}

struct Silu;
struct SiluGrad;

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = unary!(s, l, |x| x.iter().map(|&v| v.silu_parts().0).collect());
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, gy: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&gy.contiguous()?, &SiluGrad)?))
    }
}

impl CustomOp2 for SiluGrad {
    fn name(&self) -> &'static str {
        "silu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = binary!(s1, l1, s2, l2, |x, g| x
            .iter()
            .zip(g)
            .map(|(&v, &g)| g * v.silu_parts().1)
            .collect());
        Ok((out, l1.shape().clone()))
    }
}

/// `x * sigmoid(x)` with a single-pass backward.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Silu)
}

struct Upsample2;
struct Downsum2;

fn upsample2<T: Copy>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len() * 4);
    for p in 0..planes {
        for y in 0..h {
            let row = &x[(p * h + y) * w..(p * h + y + 1) * w];
            let start = out.len();
            for &v in row {
                out.push(v);
                out.push(v);
            }
            out.extend_from_within(start..start + 2 * w);
        }
    }
    out
}

fn downsum2<T: Float>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            let r0 = &g[(p * 2 * h + 2 * y) * 2 * w..][..2 * w];
            let r1 = &g[(p * 2 * h + 2 * y + 1) * 2 * w..][..2 * w];
            for x in 0..w {
                out.push(r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    out
}

fn dims4(l: &Layout) -> Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l)?;
        let out = unary!(s, l, |x| upsample2(x, n * c, h, w));
        Ok((out, Shape::from((n, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, gy: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(gy.contiguous()?.apply_op1_no_bwd(&Downsum2)?))
    }
}

impl CustomOp1 for Downsum2 {
    fn name(&self) -> &'static str {
        "downsum2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, c, h2, w2) = dims4(l)?;
        let (h, w) = (h2 / 2, w2 / 2);
        let out = unary!(s, l, |g| downsum2(g, n * c, h, w));
        Ok((out, Shape::from((n, c, h, w))))
    }
}

/// Nearest-neighbour 2x upsampling of `(N, C, H, W)`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    x.contiguous()?.apply_op1(Upsample2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn probe(shape: &[usize], seed: f64) -> Var {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((i as f64 + seed) * 0.731).sin()).collect();
        Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu).unwrap()).unwrap()
    }

    /// Checks autograd against central differences for `loss = sum(f(a, b) * w)`.
    fn check(f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>, sa: &[usize], sb: &[usize]) {
        let (a, b) = (probe(sa, 0.3), probe(sb, 1.7));
        let out_shape = f(a.as_tensor(), b.as_tensor()).unwrap().dims().to_vec();
        let wt = probe(&out_shape, 4.1).as_tensor().detach();
        let loss = |a: &Tensor, b: &Tensor| -> f64 {
            f(a, b)
                .unwrap()
                .mul(&wt)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let grads = f(a.as_tensor(), b.as_tensor())
            .unwrap()
            .mul(&wt)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for (v, other, first) in [(&a, &b, true), (&b, &a, false)] {
            let g = grads
                .get(v.as_tensor())
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let base = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in 0..base.len() {
                let eval = |d: f64| {
                    let mut p = base.clone();
                    p[i] += d;
                    let t = Tensor::from_vec(p, v.shape(), &Device::Cpu).unwrap();
                    if first {
                        loss(&t, other.as_tensor())
                    } else {
                        loss(other.as_tensor(), &t)
                    }
                };
                let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                assert!(
                    (fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "index {i}: {fd} vs {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn channel_ops_match_broadcast() {
        let x = probe(&[2, 3, 4, 5], 0.0).as_tensor().clone();
        let p = probe(&[3], 2.0).as_tensor().clone();
        let q = probe(&[2, 3], 5.0).as_tensor().clone();
        let diff = |a: Tensor, b: Tensor| {
            (a - b)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let pb = p.reshape((1, 3, 1, 1)).unwrap();
        let qb = q.reshape((2, 3, 1, 1)).unwrap();
        assert!(diff(channel_add(&x, &p).unwrap(), x.broadcast_add(&pb).unwrap()) < 1e-15);
        assert!(diff(channel_mul(&x, &p).unwrap(), x.broadcast_mul(&pb).unwrap()) < 1e-15);
        assert!(diff(channel_add(&x, &q).unwrap(), x.broadcast_add(&qb).unwrap()) < 1e-15);
        assert!(diff(silu(&x).unwrap(), x.silu().unwrap()) < 1e-15);
        assert!(diff(upsample2x(&x).unwrap(), x.upsample_nearest2d(8, 10).unwrap()) < 1e-15);
        assert!(channel_add(&x, &probe(&[4], 0.0).as_tensor().clone()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        check(channel_add, &[2, 3, 2, 2], &[3]);
        check(channel_add, &[2, 3, 2, 2], &[2, 3]);
        check(channel_mul, &[2, 3, 2, 2], &[3]);
        check(|a, b| silu(&(a * 3.0)?)?.broadcast_add(&b.sum_all()?), &[2, 2, 3], &[1]);
        check(
            |a, b| upsample2x(a)?.broadcast_mul(&b.reshape((1, 1, 1, 1))?),
            &[1, 2, 2, 3],
            &[1],
        );
    }
}
