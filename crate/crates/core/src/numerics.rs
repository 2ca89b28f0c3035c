//! Exact-math kernels shared by every stage: 2-D FFT over feature maps,
//! cosine similarity, per-channel standardization and bilinear resizing.
//!
//! FFT convention: the forward transform is unnormalized, the inverse carries
//! the `1/(H·W)` factor. The DC term sits at index `(0, 0)`.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Guard added to the product of norms in [`cosine`].
pub const COSINE_EPS: f64 = 1e-8;
/// Variance guard used by [`standardize`].
pub const STANDARDIZE_EPS: f64 = 1e-5;
/// Largest imaginary residue [`ifft2`] silently discards.
pub const IFFT_RESIDUE_LIMIT: f64 = 1e-4;

/// A `C×H×W` grid of finite reals.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!("empty feature map shape {channels}×{height}×{width}")));
        }
        if values.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "feature map {channels}×{height}×{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature value at flat index {i}")));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, values: vec![0.0; channels * height * width] }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            _ => Err(Error::invalid(format!("expected C×H×W tensor, got {:?}", t.shape()))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels, self.height, self.width], self.values.clone())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    /// The channel vector at spatial location `(y, x)`.
    pub fn column(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.at(c, y, x)).collect()
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Bilinear resize of every channel (align-corners off).
    pub fn resize(&self, height: usize, width: usize) -> FeatureMap {
        let values = tensor::resize_bilinear(&self.values, self.channels, self.height, self.width, height, width);
        FeatureMap { channels: self.channels, height, width, values }
    }
}

/// Amplitude and phase of a per-channel 2-D DFT.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    channels: usize,
    height: usize,
    width: usize,
    amplitude: Vec<f64>,
    phase: Vec<f64>,
}

impl ComplexSpectrum {
    pub fn new(channels: usize, height: usize, width: usize, amplitude: Vec<f64>, phase: Vec<f64>) -> Result<Self> {
        let n = channels * height * width;
        if n == 0 || amplitude.len() != n || phase.len() != n {
            return Err(Error::invalid("spectrum buffers do not match shape"));
        }
        if amplitude.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::invalid("amplitude entries must be finite and non-negative"));
        }
        if phase.iter().any(|p| !p.is_finite() || *p <= -std::f64::consts::PI || *p > std::f64::consts::PI) {
            return Err(Error::invalid("phase entries must lie in (-pi, pi]"));
        }
        Ok(Self { channels, height, width, amplitude, phase })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn amplitude(&self) -> &[f64] {
        &self.amplitude
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    /// Same phase, new amplitude. Negative or non-finite amplitudes are rejected.
    pub fn with_amplitude(&self, amplitude: Vec<f64>) -> Result<Self> {
        Self::new(self.channels, self.height, self.width, amplitude, self.phase.clone())
    }
}

fn wrap_phase(p: f64) -> f64 {
    if p <= -std::f64::consts::PI {
        p + 2.0 * std::f64::consts::PI
    } else {
        p
    }
}

/// In-place 2-D FFT of each `h×w` plane in `buf` (`c` planes).
fn fft2_planes(buf: &mut [Complex64], c: usize, h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for plane in buf.chunks_mut(h * w).take(c) {
        row_fft.process(plane);
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            col_fft.process(&mut column);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }
}

/// Forward transform of a real `C×H×W` buffer.
pub(crate) fn fft2_real(values: &[f64], c: usize, h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_planes(&mut buf, c, h, w, false);
    buf
}

/// Normalized inverse transform; returns the complex result.
pub(crate) fn ifft2_complex(mut buf: Vec<Complex64>, c: usize, h: usize, w: usize) -> Vec<Complex64> {
    fft2_planes(&mut buf, c, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    for v in &mut buf {
        *v *= scale;
    }
    buf
}

/// Inverse transform of `amplitude·e^{i·phase}`; returns the real part and the
/// largest absolute imaginary residue.
pub(crate) fn polar_ifft2(amplitude: &[f64], phase: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, f64) {
    let buf = amplitude.iter().zip(phase).map(|(&a, &p)| Complex64::from_polar(a, p)).collect();
    let out = ifft2_complex(buf, c, h, w);
    let residue = out.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    (out.iter().map(|z| z.re).collect(), residue)
}

/// Gradient of `Re(ifft2(amplitude·e^{i·phase}))` with respect to `amplitude`,
/// given the upstream gradient `g` on the real output.
pub(crate) fn polar_ifft2_amplitude_adjoint(g: &[f64], phase: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let buf = g.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let back = ifft2_complex(buf, c, h, w);
    back.iter().zip(phase).map(|(z, &p)| (Complex64::from_polar(1.0, p) * z).re).collect()
}

/// Per-channel unnormalized 2-D DFT, split into modulus and argument.
pub fn fft2(f: &FeatureMap) -> Result<ComplexSpectrum> {
    if f.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("fft2 input contains non-finite values"));
    }
    let (c, h, w) = f.shape();
    let buf = fft2_real(&f.values, c, h, w);
    let amplitude = buf.iter().map(|z| z.norm()).collect();
    let phase = buf.iter().map(|z| wrap_phase(z.arg())).collect();
    Ok(ComplexSpectrum { channels: c, height: h, width: w, amplitude, phase })
}

/// Inverse of [`fft2`]. Fails when the reconstruction is not real to within
/// [`IFFT_RESIDUE_LIMIT`], which signals an amplitude/phase edit that broke
/// conjugate symmetry.
pub fn ifft2(s: &ComplexSpectrum) -> Result<FeatureMap> {
    let (c, h, w) = s.shape();
    let (real, residue) = polar_ifft2(&s.amplitude, &s.phase, c, h, w);
    if residue >= IFFT_RESIDUE_LIMIT {
        return Err(Error::NumericalConsistency { residue, threshold: IFFT_RESIDUE_LIMIT });
    }
    FeatureMap::new(c, h, w, real)
}

/// `u·v / (‖u‖‖v‖ + ε)`, or 0 when either vector has zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::invalid(format!("cosine over vectors of length {} and {}", u.len(), v.len())));
    }
    Ok(cosine_unchecked(u, v))
}

#[inline]
pub(crate) fn cosine_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    dot / (nu.sqrt() * nv.sqrt() + COSINE_EPS)
}

/// Standardizes each contiguous block of `plane` values; returns the output and
/// the per-block `1/sqrt(var + ε)`.
pub(crate) fn standardize_planes(values: &[f64], plane: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; values.len()];
    let mut inv_std = Vec::with_capacity(values.len() / plane);
    for (src, dst) in values.chunks(plane).zip(out.chunks_mut(plane)) {
        let n = plane as f64;
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + STANDARDIZE_EPS).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

/// Per-channel zero-mean, unit-variance over spatial positions.
pub fn standardize(f: &FeatureMap) -> FeatureMap {
    let (values, _) = standardize_planes(&f.values, f.height * f.width);
    FeatureMap { values, ..f.clone() }
}
