//! Raw numeric kernels over row-major slices.
//!
//! Every output element of [`gemm`] is accumulated from zero in ascending
//! reduction-index order with separate multiply and add, so results are
//! bit-identical to the textbook triple loop. Convolution is lowered onto
//! the same kernel through im2col with patch entries ordered
//! `(channel, kernel_row, kernel_col)`.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// `c = a @ b` with `a: m×k`, `b: k×n`, `c: m×n`; `c` is overwritten.
pub fn gemm<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if std::mem::size_of::<T>() == 4 {
        gemm_blocked::<T, 4, 16>(m, n, k, a, b, c);
    } else {
        gemm_blocked::<T, 4, 8>(m, n, k, a, b, c);
    }
}

fn gemm_blocked<T: Scalar, const MR: usize, const NR: usize>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    let panels = n.div_ceil(NR);
    // panel-major copy of b, zero padded to a multiple of NR columns
    let mut packed = vec![T::zero(); panels * k * NR];
    for p in 0..panels {
        let j0 = p * NR;
        let w = NR.min(n - j0);
        let dst = &mut packed[p * k * NR..(p + 1) * k * NR];
        for kk in 0..k {
            dst[kk * NR..kk * NR + w].copy_from_slice(&b[kk * n + j0..kk * n + j0 + w]);
        }
    }

    let mut i0 = 0;
    while i0 + MR <= m {
        let rows: [&[T]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
        for p in 0..panels {
            let panel = &packed[p * k * NR..(p + 1) * k * NR];
            let mut acc = [[T::zero(); NR]; MR];
            for (kk, bp) in panel.chunks_exact(NR).enumerate() {
                let bp: &[T; NR] = bp.try_into().unwrap();
                for r in 0..MR {
                    let av = rows[r][kk];
                    let acc_r = &mut acc[r];
                    for j in 0..NR {
                        acc_r[j] = acc_r[j] + av * bp[j];
                    }
                }
            }
            let j0 = p * NR;
            let w = NR.min(n - j0);
            for r in 0..MR {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + w].copy_from_slice(&acc[r][..w]);
            }
        }
        i0 += MR;
    }
    for i in i0..m {
        let row = &a[i * k..(i + 1) * k];
        for p in 0..panels {
            let panel = &packed[p * k * NR..(p + 1) * k * NR];
            let mut acc = [T::zero(); NR];
            for (kk, bp) in panel.chunks_exact(NR).enumerate() {
                let av = row[kk];
                for j in 0..NR {
                    acc[j] = acc[j] + av * bp[j];
                }
            }
            let j0 = p * NR;
            let w = NR.min(n - j0);
            c[i * n + j0..i * n + j0 + w].copy_from_slice(&acc[..w]);
        }
    }
}

pub fn transpose<T: Copy>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    assert_eq!(src.len(), rows * cols);
    let mut out = Vec::with_capacity(rows * cols);
    for j in 0..cols {
        out.extend((0..rows).map(|i| src[i * cols + j]));
    }
    out
}

/// Shape bookkeeping for a 2-d cross-correlation over `N×C×H×W` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], k_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x_shape.len() != 4 || k_shape.len() != 4 || x_shape[1] != k_shape[1] {
            return Err(Error::shape("conv2d", x_shape, k_shape));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        let (h, w) = (x_shape[2] + 2 * padding, x_shape[3] + 2 * padding);
        let (kh, kw) = (k_shape[2], k_shape[3]);
        if h < kh || w < kw || kh == 0 || kw == 0 {
            return Err(Error::shape("conv2d", x_shape, k_shape));
        }
        Ok(Self {
            batch: x_shape[0],
            in_channels: x_shape[1],
            height: x_shape[2],
            width: x_shape[3],
            out_channels: k_shape[0],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h - kh) / stride + 1,
            out_w: (w - kw) / stride + 1,
        })
    }

    /// Same layer geometry applied to a different batch size.
    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_shape(&self) -> [usize; 4] {
        [self.batch, self.in_channels, self.height, self.width]
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn in_len(&self) -> usize {
        self.batch * self.in_channels * self.height * self.width
    }

    /// Input offset read by patch entry `(c, i, j)` of output pixel `(oh, ow)`,
    /// or `None` when it falls into the zero padding.
    #[inline]
    fn source(&self, c: usize, i: usize, j: usize, oh: usize, ow: usize) -> Option<usize> {
        let y = (oh * self.stride + i).checked_sub(self.padding)?;
        let x = (ow * self.stride + j).checked_sub(self.padding)?;
        if y >= self.height || x >= self.width {
            return None;
        }
        Some((c * self.height + y) * self.width + x)
    }
}

/// Lowers `x` to a `(N·P)×K` patch matrix, one row per output pixel.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    assert_eq!(x.len(), g.in_len());
    let (p, k) = (g.out_pixels(), g.patch_len());
    let img = g.in_channels * g.height * g.width;
    let mut cols = vec![T::zero(); g.batch * p * k];
    for n in 0..g.batch {
        let xn = &x[n * img..(n + 1) * img];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let row = &mut cols[((n * p) + oh * g.out_w + ow) * k..][..k];
                let mut idx = 0;
                for c in 0..g.in_channels {
                    for i in 0..g.kernel_h {
                        for j in 0..g.kernel_w {
                            if let Some(s) = g.source(c, i, j, oh, ow) {
                                row[idx] = xn[s];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the input grid.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (p, k) = (g.out_pixels(), g.patch_len());
    assert_eq!(cols.len(), g.batch * p * k);
    let img = g.in_channels * g.height * g.width;
    let mut x = vec![T::zero(); g.in_len()];
    for n in 0..g.batch {
        let xn = &mut x[n * img..(n + 1) * img];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let row = &cols[((n * p) + oh * g.out_w + ow) * k..][..k];
                let mut idx = 0;
                for c in 0..g.in_channels {
                    for i in 0..g.kernel_h {
                        for j in 0..g.kernel_w {
                            if let Some(s) = g.source(c, i, j, oh, ow) {
                                xn[s] = xn[s] + row[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution. Returns the `N×O×Ho×Wo` output and the patch matrix
/// (kept by the tape for the kernel gradient).
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let (p, k, o) = (g.out_pixels(), g.patch_len(), g.out_channels);
    let cols = im2col(x, g);
    let kt = transpose(o, k, kernel);
    let mut out_mat = vec![T::zero(); g.batch * p * o];
    gemm(g.batch * p, o, k, &cols, &kt, &mut out_mat);
    let mut out = vec![T::zero(); g.batch * o * p];
    for n in 0..g.batch {
        for ch in 0..o {
            let b = bias.map_or(T::zero(), |b| b[ch]);
            let dst = &mut out[(n * o + ch) * p..(n * o + ch + 1) * p];
            for (px, d) in dst.iter_mut().enumerate() {
                let v = out_mat[(n * p + px) * o + ch];
                *d = if bias.is_some() { v + b } else { v };
            }
        }
    }
    (out, cols)
}

/// Gradient of a convolution with respect to its input (transposed convolution).
pub fn conv2d_backward_input<T: Scalar>(dout: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let (p, k, o) = (g.out_pixels(), g.patch_len(), g.out_channels);
    assert_eq!(dout.len(), g.batch * o * p);
    let mut dmat = vec![T::zero(); g.batch * p * o];
    for n in 0..g.batch {
        for ch in 0..o {
            let src = &dout[(n * o + ch) * p..(n * o + ch + 1) * p];
            for (px, &v) in src.iter().enumerate() {
                dmat[(n * p + px) * o + ch] = v;
            }
        }
    }
    let mut dcols = vec![T::zero(); g.batch * p * k];
    gemm(g.batch * p, k, o, &dmat, kernel, &mut dcols);
    col2im(&dcols, g)
}

/// Gradient of a convolution with respect to its kernel, given the saved patches.
pub fn conv2d_backward_kernel<T: Scalar>(dout: &[T], cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (p, k, o) = (g.out_pixels(), g.patch_len(), g.out_channels);
    let np = g.batch * p;
    let mut dt = vec![T::zero(); o * np];
    for n in 0..g.batch {
        for ch in 0..o {
            dt[ch * np + n * p..ch * np + (n + 1) * p]
                .copy_from_slice(&dout[(n * o + ch) * p..(n * o + ch + 1) * p]);
        }
    }
    let mut dk = vec![T::zero(); o * k];
    gemm(o, k, np, &dt, cols, &mut dk);
    dk
}

/// Per-channel sum of an `N×C×rest` buffer.
pub fn channel_sums<T: Scalar>(x: &[T], batch: usize, channels: usize) -> Vec<T> {
    let inner = x.len() / (batch * channels).max(1);
    let mut out = vec![T::zero(); channels];
    for n in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let s = &x[(n * channels + c) * inner..(n * channels + c + 1) * inner];
            *o = *o + s.iter().copied().sum::<T>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_triple_loop_on_ragged_sizes() {
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for &(m, n, k) in &[(1, 1, 1), (3, 5, 7), (9, 17, 4), (4, 8, 0), (13, 33, 29)] {
            let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
            let mut c = vec![f64::NAN; m * n];
            gemm(m, n, k, &a, &b, &mut c);
            assert_eq!(c, naive(m, n, k, &a, &b), "m={m} n={n} k={k}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(&[2, 2, 5, 4], &[3, 2, 3, 2], 2, 1).unwrap();
        let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn geometry_rejects_bad_arguments() {
        assert!(ConvGeometry::new(&[1, 1, 3, 3], &[1, 1, 2, 2], 0, 0).is_err());
        assert!(ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 2, 3, 3], &[1, 1, 2, 2], 1, 0).is_err());
        let g = ConvGeometry::new(&[1, 1, 28, 28], &[16, 1, 4, 4], 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (14, 14));
    }
}
