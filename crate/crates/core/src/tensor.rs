//! Dense row-major `f64` tensors and the handful of kernels the model needs.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} does not match {} elements", data.len());
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Self {
        assert_eq!(self.shape.len(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self { shape: vec![c, r], data: out }
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`, all row-major slices.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape.len(), 2);
    assert_eq!(b.shape.len(), 2);
    let (m, k) = (a.shape[0], a.shape[1]);
    assert_eq!(b.shape[0], k, "matmul inner dims {:?} x {:?}", a.shape, b.shape);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    matmul_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// Geometry of a square-kernel 2-D convolution over a single `C×H×W` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfold `x` into a `(C·k·k) × (Ho·Wo)` matrix.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo) = (self.out_height(), self.out_width());
        let cols = ho * wo;
        let mut out = vec![0.0; self.col_rows() * cols];
        for c in 0..self.in_channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src_row = (c * self.height + iy as usize) * self.width;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[oy * wo + ox] = x[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`ConvGeom::im2col`].
    pub fn col2im(&self, cols_data: &[f64]) -> Vec<f64> {
        let (ho, wo) = (self.out_height(), self.out_width());
        let cols = ho * wo;
        let mut x = vec![0.0; self.in_channels * self.height * self.width];
        for c in 0..self.in_channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let src = &cols_data[row * cols..(row + 1) * cols];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst_row = (c * self.height + iy as usize) * self.width;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                x[dst_row + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Forward convolution. `weight` is `O×C×k×k`, `bias` has `O` entries.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let geom = conv_geom(x, weight, stride, pad);
    let cols = geom.im2col(x.data());
    conv2d_from_cols(&geom, &cols, weight, bias)
}

pub(crate) fn conv_geom(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> ConvGeom {
    assert_eq!(x.shape().len(), 3, "conv input must be C×H×W, got {:?}", x.shape());
    assert_eq!(weight.shape().len(), 4, "conv weight must be O×C×k×k");
    assert_eq!(weight.dim(1), x.dim(0), "conv channel mismatch {:?} vs {:?}", weight.shape(), x.shape());
    assert_eq!(weight.dim(2), weight.dim(3));
    ConvGeom { in_channels: x.dim(0), height: x.dim(1), width: x.dim(2), kernel: weight.dim(2), stride, pad }
}

pub(crate) fn conv2d_from_cols(geom: &ConvGeom, cols: &[f64], weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let o = weight.dim(0);
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let n = ho * wo;
    let mut out = vec![0.0; o * n];
    if let Some(b) = bias {
        assert_eq!(b.len(), o);
        for (oc, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(b.data()[oc]);
        }
    }
    matmul_acc(weight.data(), cols, &mut out, o, geom.col_rows(), n);
    Tensor::new(&[o, ho, wo], out)
}

/// Sampling taps for align-corners=false bilinear interpolation along one axis.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resize of each channel of a `C×H×W` buffer.
pub fn resize_bilinear(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: scatters `C×oh×ow` gradients back onto `C×h×w`.
pub fn resize_bilinear_adjoint(g: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = src[oy * ow + ox];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
        let (o, k) = (w.dim(0), w.dim(2));
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((oc * c + ic) * k + ky) * k + kx] * x.data()[(ic * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        Tensor::new(&[o, ho, wo], out)
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = Tensor::from_fn(&[3, 5, 6], |i| ((i * 7) % 11) as f64 * 0.1 - 0.4);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 5) % 13) as f64 * 0.05 - 0.3);
        let b = Tensor::from_fn(&[4], |i| i as f64 * 0.1);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let fast = conv2d(&x, &w, Some(&b), stride, pad);
            let slow = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let geom = ConvGeom { in_channels: 2, height: 5, width: 4, kernel: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = geom.im2col(&x);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = geom.col2im(&y);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn resize_adjoint_and_identity() {
        let x: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.5).sin()).collect();
        let same = resize_bilinear(&x, 2, 3, 4, 3, 4);
        assert_eq!(same, x);
        let up = resize_bilinear(&x, 2, 3, 4, 7, 9);
        let g: Vec<f64> = (0..up.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = up.iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = resize_bilinear_adjoint(&g, 2, 3, 4, 7, 9);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_fn(&[3, 4], |i| i as f64 - 5.0);
        let b = Tensor::from_fn(&[4, 2], |i| (i as f64).sqrt());
        let c = matmul(&a, &b);
        let mut tn = vec![0.0; 6];
        matmul_tn_acc(a.transpose().data(), b.data(), &mut tn, 3, 4, 2);
        let mut nt = vec![0.0; 6];
        matmul_nt_acc(a.data(), b.transpose().data(), &mut nt, 3, 4, 2);
        assert_eq!(c.data(), &tn[..]);
        for (x, y) in c.data().iter().zip(&nt) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
