//! 2-D convolution as a fused custom op: per image, output pixels are
//! processed in cache-sized chunks (im2col into a scratch buffer followed by
//! a GEMM). Gradients are provided by two companion ops.

use candle_core::{CpuStorage, CustomOp2, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    c_in: usize,
    height: usize,
    width: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

/// Scratch budget for one im2col chunk, in elements.
const CHUNK_ELEMS: usize = 1 << 17;

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn pixels(&self) -> usize {
        let (ho, wo) = self.out_hw();
        ho * wo
    }

    fn rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Pixels per chunk: a whole number of output rows.
    fn chunk(&self) -> usize {
        let (ho, wo) = self.out_hw();
        let rows = (CHUNK_ELEMS / (self.rows() * wo)).clamp(1, ho);
        rows * wo
    }

    /// For output rows starting at pixel `p0` (a row boundary) and `n`
    /// pixels, calls `f(col_offset, input_offset, len, step)` for each
    /// contiguous run of in-bounds taps: column entries `col_offset..+len`
    /// map to input indices `input_offset + i * step`.
    #[inline]
    fn runs(&self, p0: usize, n: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (_, wo) = self.out_hw();
        let (k, s, pad) = (self.kernel, self.stride, self.pad);
        let (oy0, rows) = (p0 / wo, n / wo);
        for c in 0..self.c_in {
            let plane = c * self.height * self.width;
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    // Valid ox: ox * s + kx >= pad and ox * s + kx - pad < width.
                    let ox0 = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
                    let lim = self.width + pad - kx;
                    let ox1 = ((lim - 1) / s + 1).min(wo);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for dy in 0..rows {
                        let iy = ((oy0 + dy) * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let col_off = row * n + dy * wo + ox0;
                        let in_off = plane + iy as usize * self.width + ox0 * s + kx - pad;
                        f(col_off, in_off, ox1 - ox0, s);
                    }
                }
            }
        }
    }

    fn im2col<T: Elem>(&self, img: &[T], p0: usize, n: usize, col: &mut [T]) {
        col[..self.rows() * n].fill(T::zero());
        self.runs(p0, n, |o, i, len, step| {
            if step == 1 {
                col[o..o + len].copy_from_slice(&img[i..i + len]);
            } else {
                for (j, d) in col[o..o + len].iter_mut().enumerate() {
                    *d = img[i + j * step];
                }
            }
        });
    }

    fn col2im<T: Elem>(&self, col: &[T], p0: usize, n: usize, img: &mut [T]) {
        self.runs(p0, n, |o, i, len, step| {
            if step == 1 {
                for (d, v) in img[i..i + len].iter_mut().zip(&col[o..o + len]) {
                    *d += *v;
                }
            } else {
                for (j, v) in col[o..o + len].iter().enumerate() {
                    img[i + j * step] += *v;
                }
            }
        });
    }

    fn forward<T: Elem>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let p = self.pixels();
        let (r, co) = (self.rows(), self.c_out);
        let in_sz = self.c_in * self.height * self.width;
        let mut y = vec![T::zero(); self.batch * co * p];
        let chunk = self.chunk();
        let mut col = vec![T::zero(); r * chunk];
        for b in 0..self.batch {
            let img = &x[b * in_sz..(b + 1) * in_sz];
            let out = &mut y[b * co * p..(b + 1) * co * p];
            let mut p0 = 0;
            while p0 < p {
                let n = chunk.min(p - p0);
                let (src, src_rs) = if self.pointwise() {
                    (&img[p0..], p)
                } else {
                    self.im2col(img, p0, n, &mut col);
                    (&col[..], n)
                };
                // out[:, p0..p0+n] = W (co x r) * src (r x n)
                gemm_into(co, n, r, &mut out[p0..], p, false, w, r, 1, src, src_rs, 1);
                p0 += n;
            }
        }
        y
    }

    fn grad_input<T: Elem>(&self, gy: &[T], w: &[T]) -> Vec<T> {
        let p = self.pixels();
        let (r, co) = (self.rows(), self.c_out);
        let in_sz = self.c_in * self.height * self.width;
        let mut gx = vec![T::zero(); self.batch * in_sz];
        let chunk = self.chunk();
        let mut col = vec![T::zero(); r * chunk];
        for b in 0..self.batch {
            let g = &gy[b * co * p..(b + 1) * co * p];
            let img = &mut gx[b * in_sz..(b + 1) * in_sz];
            let mut p0 = 0;
            while p0 < p {
                let n = chunk.min(p - p0);
                if self.pointwise() {
                    // img[:, p0..] += W^T (r x co) * g[:, p0..]
                    gemm_into(r, n, co, &mut img[p0..], p, true, w, 1, r, &g[p0..], p, 1);
                } else {
                    gemm_into(r, n, co, &mut col, n, false, w, 1, r, &g[p0..], p, 1);
                    self.col2im(&col, p0, n, img);
                }
                p0 += n;
            }
        }
        gx
    }

    fn grad_weight<T: Elem>(&self, x: &[T], gy: &[T]) -> Vec<T> {
        let p = self.pixels();
        let (r, co) = (self.rows(), self.c_out);
        let in_sz = self.c_in * self.height * self.width;
        let mut gw = vec![T::zero(); co * r];
        let chunk = self.chunk();
        let mut col = vec![T::zero(); r * chunk];
        for b in 0..self.batch {
            let img = &x[b * in_sz..(b + 1) * in_sz];
            let g = &gy[b * co * p..(b + 1) * co * p];
            let mut p0 = 0;
            while p0 < p {
                let n = chunk.min(p - p0);
                let (src, src_rs) = if self.pointwise() {
                    (&img[p0..], p)
                } else {
                    self.im2col(img, p0, n, &mut col);
                    (&col[..], n)
                };
                // gw (co x r) += g[:, p0..] (co x n) * src^T (n x r)
                gemm_into(co, r, n, &mut gw, r, true, &g[p0..], p, 1, src, 1, src_rs);
                p0 += n;
            }
        }
        gw
    }
}

trait Elem: Copy + Default + std::ops::AddAssign + 'static {
    fn zero() -> Self;
    fn one() -> Self;
}

impl Elem for f32 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
}

impl Elem for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
}

/// `dst (m x n) [+]= lhs (m x k) * rhs (k x n)` with explicit row/column
/// strides; `dst` has unit column stride.
#[allow(clippy::too_many_arguments)]
fn gemm_into<T: Elem>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    dst_rs: usize,
    accumulate: bool,
    lhs: &[T],
    lhs_rs: usize,
    lhs_cs: usize,
    rhs: &[T],
    rhs_rs: usize,
    rhs_cs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, n, dst_rs, 1) < dst.len());
    if k > 0 {
        assert!(last(m, k, lhs_rs, lhs_cs) < lhs.len());
        assert!(last(k, n, rhs_rs, rhs_cs) < rhs.len());
    }
    // SAFETY: every index touched by the kernel is bounded by the asserts
    // above, and `dst` does not alias the inputs.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            dst_rs as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

fn slice<'a, T>(s: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("conv2d expects contiguous operands"),
    }
}

macro_rules! dispatch {
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
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands only"),
        }
    };
}

struct Conv(Geometry);
struct ConvGradInput(Geometry);
struct ConvGradWeight(Geometry);

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (ho, wo) = g.out_hw();
        let out = dispatch!(s1, l1, s2, l2, |x, w| g.forward(x, w));
        Ok((out, Shape::from((g.batch, g.c_out, ho, wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, gy: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let gy = gy.contiguous()?;
        let gx = if x.track_op() {
            Some(gy.apply_op2_no_bwd(w, &ConvGradInput(self.0))?)
        } else {
            None
        };
        let gw = if w.track_op() {
            Some(x.apply_op2_no_bwd(&gy, &ConvGradWeight(self.0))?)
        } else {
            None
        };
        Ok((gx, gw))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch!(s1, l1, s2, l2, |gy, w| g.grad_input(gy, w));
        Ok((out, Shape::from((g.batch, g.c_in, g.height, g.width))))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch!(s1, l1, s2, l2, |x, gy| g.grad_weight(x, gy));
        Ok((out, Shape::from((g.c_out, g.c_in, g.kernel, g.kernel))))
    }
}

/// Cross-correlation of `x: (b, ci, h, w)` with `w: (co, ci, k, k)`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (batch, c_in, height, width) = x.dims4()?;
    let (c_out, ci, k, k2) = w.dims4()?;
    if ci != c_in || k != k2 || stride == 0 || height + 2 * pad < k || width + 2 * pad < k {
        candle_core::bail!("conv2d: input {:?} incompatible with kernel {:?}", x.dims(), w.dims());
    }
    let g = Geometry {
        batch,
        c_in,
        height,
        width,
        c_out,
        kernel: k,
        stride,
        pad,
    };
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv(g))
}
