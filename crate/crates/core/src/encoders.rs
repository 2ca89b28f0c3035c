//! Frozen image and text encoders.
//!
//! The toy encoders are fixed random functions of their seed: a patchify
//! projection followed by a 3×3 mixing layer and a pointwise mixing layer.
//! Real backbones plug in behind [`ImageEncoder`] / [`TextEncoder`].

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::FeatureMap;
use crate::params::{named_rng, stable_hash};
use crate::tensor::{conv2d, Tensor};

/// An RGB image with values in `[0, 1]`, stored `3×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    pub category: String,
    pub domain_tag: String,
}

impl ImageSample {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, category: &str, domain_tag: &str) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != 3 * height * width {
            return Err(Error::invalid(format!("image {height}×{width} needs {} pixel values, got {}", 3 * height * width, pixels.len())));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self { height, width, pixels, category: category.to_string(), domain_tag: domain_tag.to_string() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }
}

/// A `{0,1}` mask at image resolution.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::invalid(format!("mask {height}×{width} needs {} values", height * width)));
        }
        if values.iter().any(|v| *v > 1) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        Ok(Self { height, width, values })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let values = (0..height * width).map(|i| u8::from(f(i / width, i % width))).collect();
        Self { height, width, values }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| *v as usize).sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| f64::from(*v)).collect()
    }

    /// Majority vote over `stride×stride` cells; ties go to foreground.
    pub fn downsample_majority(&self, stride: usize) -> Result<Vec<bool>> {
        if stride == 0 || !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride) {
            return Err(Error::invalid(format!("mask {}×{} is not divisible by stride {stride}", self.height, self.width)));
        }
        let (gh, gw) = (self.height / stride, self.width / stride);
        let mut out = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut fg = 0;
                for y in gy * stride..(gy + 1) * stride {
                    for x in gx * stride..(gx + 1) * stride {
                        fg += self.values[y * self.width + x] as usize;
                    }
                }
                out.push(2 * fg >= stride * stride);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub patch_stride: usize,
    pub feature_dim: usize,
    pub prototype_dim: usize,
    pub seed: u64,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_stride == 0 {
            return Err(Error::config("patch_stride", "must be positive"));
        }
        if self.feature_dim < 4 {
            return Err(Error::config("feature_dim", "must be at least 4"));
        }
        if self.prototype_dim < 4 {
            return Err(Error::config("prototype_dim", "must be at least 4"));
        }
        Ok(())
    }
}

pub trait ImageEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn stride(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn encode(&self, img: &ImageSample) -> Result<FeatureMap>;
}

pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, label: &str) -> Result<Vec<f64>>;
}

/// Which activation of the toy image encoder is exposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureLayer {
    Patch,
    Mix,
    Final,
}

impl FeatureLayer {
    pub fn name(self) -> &'static str {
        match self {
            Self::Patch => "patch",
            Self::Mix => "mix",
            Self::Final => "final",
        }
    }
}

impl std::str::FromStr for FeatureLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(Self::Patch),
            "mix" => Ok(Self::Mix),
            "final" => Ok(Self::Final),
            other => Err(Error::config("encoder.feature_layer", format!("unknown layer `{other}`"))),
        }
    }
}

/// Scale of the two nonlinear residual branches.
const RESIDUAL_GAIN: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct ToyImageEncoder {
    name: String,
    stride: usize,
    out_channels: usize,
    layer: FeatureLayer,
    projection: Tensor,
    mix: Tensor,
    pointwise: Tensor,
    biases: [Tensor; 3],
}

impl ToyImageEncoder {
    /// `stream` separates the parameter streams of encoders sharing a seed.
    pub fn new(stream: &str, stride: usize, out_channels: usize, seed: u64) -> Self {
        let patch = 3 * stride * stride;
        let mut rng = named_rng(seed, &format!("encoder.{stream}"));
        let mut draw = |shape: &[usize], fan_in: usize, gain: f64| {
            let n = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("std");
            Tensor::from_fn(shape, |_| n.sample(&mut rng))
        };
        let projection = draw(&[out_channels, patch, 1, 1], patch, 2.0);
        let mix = draw(&[out_channels, out_channels, 3, 3], 9 * out_channels, 1.0);
        let pointwise = draw(&[out_channels, out_channels, 1, 1], out_channels, 1.0);
        let zero = Tensor::zeros(&[out_channels]);
        Self {
            name: stream.to_string(),
            stride,
            out_channels,
            layer: FeatureLayer::Final,
            projection,
            mix,
            pointwise,
            biases: [zero.clone(), zero.clone(), zero],
        }
    }

    pub fn with_layer(mut self, layer: FeatureLayer) -> Self {
        self.layer = layer;
        self
    }

    /// Replaces the three zero bias vectors.
    pub fn with_biases(mut self, biases: [Tensor; 3]) -> Self {
        for b in &biases {
            assert_eq!(b.len(), self.out_channels);
        }
        self.biases = biases;
        self
    }

    fn patchify(&self, img: &ImageSample) -> Result<Tensor> {
        let s = self.stride;
        if !img.height().is_multiple_of(s) || !img.width().is_multiple_of(s) {
            return Err(Error::invalid(format!("image {}×{} is not divisible by patch stride {s}", img.height(), img.width())));
        }
        let (gh, gw) = (img.height() / s, img.width() / s);
        let patch = 3 * s * s;
        let mut out = vec![0.0; patch * gh * gw];
        for c in 0..3 {
            for dy in 0..s {
                for dx in 0..s {
                    let row = (c * s + dy) * s + dx;
                    for gy in 0..gh {
                        for gx in 0..gw {
                            out[(row * gh + gy) * gw + gx] = img.at(c, gy * s + dy, gx * s + dx);
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(&[patch, gh, gw], out))
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn encode(&self, img: &ImageSample) -> Result<FeatureMap> {
        let patches = self.patchify(img)?;
        let mut h = conv2d(&patches, &self.projection, Some(&self.biases[0]), 1, 0);
        if self.layer != FeatureLayer::Patch {
            let m = conv2d(&h, &self.mix, Some(&self.biases[1]), 1, 1).map(|v| RESIDUAL_GAIN * v.tanh());
            h.add_assign(&m);
            if self.layer == FeatureLayer::Final {
                let p = conv2d(&h, &self.pointwise, Some(&self.biases[2]), 1, 0).map(|v| RESIDUAL_GAIN * v.tanh());
                h.add_assign(&p);
            }
        }
        FeatureMap::from_tensor(&h)
    }
}

/// Hash-bucketed character n-gram counts, randomly projected and L2-normalized.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    dim: usize,
    seed: u64,
    projection: Tensor,
}

const TEXT_BUCKETS: usize = 128;

impl ToyTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = named_rng(seed, "encoder.text");
        let n = Normal::new(0.0, 1.0).expect("std");
        let projection = Tensor::from_fn(&[TEXT_BUCKETS, dim], |_| n.sample(&mut rng));
        Self { dim, seed, projection }
    }
}

impl TextEncoder for ToyTextEncoder {
    fn name(&self) -> &str {
        "toy"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, label: &str) -> Result<Vec<f64>> {
        let label = label.trim().to_lowercase();
        if label.is_empty() {
            return Err(Error::invalid("text label must be non-empty"));
        }
        let chars: Vec<char> = std::iter::once('^').chain(label.chars()).chain(std::iter::once('$')).collect();
        let mut counts = [0.0f64; TEXT_BUCKETS];
        let mut bump = |gram: &str| {
            let h = stable_hash(self.seed, gram);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            counts[(h % TEXT_BUCKETS as u64) as usize] += sign;
        };
        for c in &chars[1..chars.len() - 1] {
            bump(&c.to_string());
        }
        for w in chars.windows(2) {
            bump(&w.iter().collect::<String>());
        }
        let mut out = vec![0.0; self.dim];
        for (b, &cnt) in counts.iter().enumerate() {
            if cnt != 0.0 {
                for (o, p) in out.iter_mut().zip(&self.projection.data()[b * self.dim..(b + 1) * self.dim]) {
                    *o += cnt * p;
                }
            }
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid(format!("text encoder produced a zero vector for `{label}`")));
        }
        Ok(out.into_iter().map(|v| v / norm).collect())
    }
}

/// The three frozen encoders a pipeline uses.
pub struct EncoderSet {
    /// Dense features that pass through frequency alignment and the decoder.
    pub image: Box<dyn ImageEncoder>,
    /// Per-location features in prototype space.
    pub patches: Box<dyn ImageEncoder>,
    pub text: Box<dyn TextEncoder>,
}

impl EncoderSet {
    /// Resolves encoders by plugin name. Only `toy` is compiled in.
    pub fn build(image: &str, text: &str, layer: FeatureLayer, spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let (image_enc, patch_enc): (Box<dyn ImageEncoder>, Box<dyn ImageEncoder>) = match image {
            "toy" => (
                Box::new(ToyImageEncoder::new("image", spec.patch_stride, spec.feature_dim, spec.seed).with_layer(layer)),
                Box::new(ToyImageEncoder::new("patches", spec.patch_stride, spec.prototype_dim, spec.seed)),
            ),
            "sam-plugin" => return Err(Error::config("encoder", "the `sam-plugin` backbone is not available in this build")),
            other => return Err(Error::config("encoder", format!("unknown encoder `{other}`"))),
        };
        let text_enc: Box<dyn TextEncoder> = match text {
            "toy" => Box::new(ToyTextEncoder::new(spec.prototype_dim, spec.seed)),
            "clip-plugin" => return Err(Error::config("text_encoder", "the `clip-plugin` text encoder is not available in this build")),
            other => return Err(Error::config("text_encoder", format!("unknown text encoder `{other}`"))),
        };
        Ok(Self { image: image_enc, patches: patch_enc, text: text_enc })
    }

    pub fn toy(spec: EncoderSpec) -> Self {
        Self::build("toy", "toy", FeatureLayer::Final, spec).expect("toy encoders always build")
    }
}
