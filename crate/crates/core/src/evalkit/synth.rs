//! Colored-shape episodes on textured backgrounds, with a target domain that
//! inverts colors, overlays a high-frequency texture and lowers contrast.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{BinaryMask, ImageSample};
use crate::error::{Error, Result};
use crate::numerics::{fft2, FeatureMap};
use crate::params::named_rng;
use crate::rct::Lexicon;
use crate::training::{categories, check_disjoint, Episode, SupportPool};

const PALETTE: [(&str, [f64; 3]); 10] = [
    ("red", [0.92, 0.12, 0.10]),
    ("green", [0.10, 0.78, 0.20]),
    ("blue", [0.12, 0.22, 0.95]),
    ("yellow", [0.95, 0.88, 0.10]),
    ("cyan", [0.10, 0.85, 0.90]),
    ("magenta", [0.90, 0.10, 0.85]),
    ("orange", [1.00, 0.55, 0.05]),
    ("purple", [0.55, 0.15, 0.85]),
    ("white", [0.96, 0.96, 0.96]),
    ("lime", [0.62, 0.95, 0.10]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
    Bar,
}

impl Shape {
    const ALL: [(&'static str, Shape); 7] = [
        ("disk", Shape::Disk),
        ("square", Shape::Square),
        ("triangle", Shape::Triangle),
        ("ring", Shape::Ring),
        ("cross", Shape::Cross),
        ("diamond", Shape::Diamond),
        ("bar", Shape::Bar),
    ];

    /// Whether offset `(dy, dx)` from the center lies inside a shape of radius `r`.
    pub fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        let d = (dx * dx + dy * dy).sqrt();
        match self {
            Shape::Disk => d <= r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => dy >= -r && dy <= 0.7 * r && dx.abs() <= 0.6 * (dy + r),
            Shape::Ring => d <= r && d >= 0.55 * r,
            Shape::Cross => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Bar => dx.abs() <= r && dy.abs() <= 0.35 * r,
        }
    }
}

/// Splits `"<color> <shape>"` into its palette color and shape.
pub fn parse_category(name: &str) -> Result<([f64; 3], Shape)> {
    let mut words = name.split_whitespace();
    let (Some(c), Some(s), None) = (words.next(), words.next(), words.next()) else {
        return Err(Error::config("data.categories", format!("`{name}` is not `<color> <shape>`")));
    };
    let color = PALETTE.iter().find(|(n, _)| *n == c).map(|(_, v)| *v);
    let shape = Shape::ALL.iter().find(|(n, _)| *n == s).map(|(_, v)| *v);
    match (color, shape) {
        (Some(color), Some(shape)) => Ok((color, shape)),
        _ => Err(Error::config("data.categories", format!("unknown color or shape in `{name}`"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftParams {
    pub invert: bool,
    /// Amplitude of the checkerboard overlay.
    pub texture_amp: f64,
    /// Checker cell size in pixels.
    pub texture_period: usize,
    /// Contrast factor around mid-gray.
    pub contrast: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self { invert: true, texture_amp: 0.12, texture_period: 1, contrast: 0.7 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomainSpec {
    pub image_size: usize,
    pub source_categories: Vec<String>,
    pub heldout_categories: Vec<String>,
    pub target_categories: Vec<String>,
    pub train_episodes: usize,
    /// Episodes in each evaluation split.
    pub eval_episodes: usize,
    /// Labelled target pairs per category for fine-tuning.
    pub finetune_pairs: usize,
    /// Supports stored with each evaluation episode.
    pub max_shots: usize,
    pub distractor_prob: f64,
    pub shift: ShiftParams,
    pub seed: u64,
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            source_categories: names(&[
                "red disk",
                "green square",
                "blue triangle",
                "yellow ring",
                "cyan cross",
                "magenta diamond",
                "orange bar",
                "white disk",
                "red triangle",
                "green ring",
                "blue bar",
                "yellow diamond",
                "cyan square",
                "magenta disk",
                "orange cross",
                "white triangle",
            ]),
            heldout_categories: names(&["purple square", "lime ring", "red cross"]),
            target_categories: names(&["blue disk", "green triangle", "orange diamond", "yellow square"]),
            train_episodes: 240,
            eval_episodes: 60,
            finetune_pairs: 5,
            max_shots: 5,
            distractor_prob: 0.5,
            shift: ShiftParams::default(),
            seed: 0,
        }
    }
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let lists = [&self.source_categories, &self.heldout_categories, &self.target_categories];
        for l in lists {
            if l.is_empty() {
                return Err(Error::config("data.categories", "every category list needs at least one entry"));
            }
            for c in l {
                parse_category(c)?;
            }
        }
        let src = categories(self.source_categories.iter().chain(&self.heldout_categories).map(String::as_str));
        let tgt = categories(self.target_categories.iter().map(String::as_str));
        check_disjoint(&src, &tgt).map_err(|e| Error::config("data.target_categories", e.to_string()))?;
        let train = categories(self.source_categories.iter().map(String::as_str));
        let held = categories(self.heldout_categories.iter().map(String::as_str));
        check_disjoint(&train, &held).map_err(|e| Error::config("data.heldout_categories", e.to_string()))?;
        if self.image_size < 16 {
            return Err(Error::config("image_size", "synthetic images need at least 16 pixels"));
        }
        if self.max_shots == 0 || self.finetune_pairs == 0 {
            return Err(Error::config("data.max_shots", "shot counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::config("data.distractor_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Offline negatives: the other categories of the same domain.
    pub fn lexicon(&self) -> Lexicon {
        let mut lex = Lexicon::new();
        let source: Vec<&str> = self.source_categories.iter().chain(&self.heldout_categories).map(String::as_str).collect();
        let target: Vec<&str> = self.target_categories.iter().map(String::as_str).collect();
        for group in [&source, &target] {
            for c in group.iter() {
                let others: Vec<&str> = group.iter().copied().filter(|o| o != c).collect();
                lex.insert(c, &others);
            }
        }
        lex
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub source_train: Vec<Episode>,
    pub source_heldout: Vec<Episode>,
    pub target_finetune: Vec<SupportPool>,
    pub target_test: Vec<Episode>,
}

/// One shape instance in an image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: [f64; 3],
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub background: [f64; 3],
    /// Low-frequency stripe: amplitude, spatial frequencies and phase.
    pub pattern: (f64, f64, f64, f64),
    pub noise_seed: u64,
    pub distractor: Option<ObjectSpec>,
    pub target: ObjectSpec,
}

fn jitter_color(c: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0))
}

fn sample_object(rng: &mut ChaCha8Rng, size: usize, color: [f64; 3], shape: Shape) -> ObjectSpec {
    let s = size as f64;
    let radius = rng.random_range(0.16 * s..0.28 * s);
    let lo = radius + 1.0;
    let hi = s - radius - 1.0;
    ObjectSpec { shape, color: jitter_color(color, rng), cy: rng.random_range(lo..hi), cx: rng.random_range(lo..hi), radius }
}

fn sample_scene(rng: &mut ChaCha8Rng, size: usize, category: &str, distractor_prob: f64, pool: &[&str]) -> Result<Scene> {
    let (color, shape) = parse_category(category)?;
    let gray = rng.random_range(0.3..0.6);
    let background = [0, 1, 2].map(|_| gray + rng.random_range(-0.05..0.05));
    let pattern = (0.06, rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..std::f64::consts::TAU));
    let target = sample_object(rng, size, color, shape);
    let mut distractor = None;
    let others: Vec<&str> =
        pool.iter().copied().filter(|o| parse_category(o).map(|(c, s)| c != color && s != shape).unwrap_or(false)).collect();
    if !others.is_empty() && rng.random_bool(distractor_prob) {
        let (dc, ds) = parse_category(others[rng.random_range(0..others.len())])?;
        for _ in 0..20 {
            let d = sample_object(rng, size, dc, ds);
            let gap = ((d.cx - target.cx).powi(2) + (d.cy - target.cy).powi(2)).sqrt();
            if gap > d.radius + target.radius + 1.0 {
                distractor = Some(d);
                break;
            }
        }
    }
    Ok(Scene { background, pattern, noise_seed: rng.random(), distractor, target })
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Draws a scene. The mask is the target object's region exactly.
pub fn render_scene(scene: &Scene, size: usize, category: &str, shift: Option<&ShiftParams>) -> Result<(ImageSample, BinaryMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
    let (amp, fy, fx, phase) = scene.pattern;
    let s = size as f64;
    let mut px = vec![0.0; 3 * size * size];
    let inside = |o: &ObjectSpec, y: usize, x: usize| o.shape.contains(y as f64 + 0.5 - o.cy, x as f64 + 0.5 - o.cx, o.radius);
    for y in 0..size {
        for x in 0..size {
            let wave = amp * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / s + phase).sin();
            let noise: f64 = rng.random_range(-0.02..0.02);
            let color = if inside(&scene.target, y, x) {
                scene.target.color
            } else if let Some(d) = scene.distractor.as_ref().filter(|d| inside(d, y, x)) {
                d.color
            } else {
                scene.background.map(|b| b + wave)
            };
            for c in 0..3 {
                let mut v = color[c] + noise;
                if let Some(sh) = shift {
                    if sh.invert {
                        v = 1.0 - v;
                    }
                    let checker = ((y / sh.texture_period.max(1)) + (x / sh.texture_period.max(1))) % 2 == 0;
                    v += if checker { sh.texture_amp } else { -sh.texture_amp };
                    v = 0.5 + (v - 0.5) * sh.contrast;
                }
                px[(c * size + y) * size + x] = quantize(v);
            }
        }
    }
    let mask = BinaryMask::from_fn(size, size, |y, x| inside(&scene.target, y, x));
    let tag = if shift.is_some() { "target" } else { "source" };
    Ok((ImageSample::new(size, size, px, category, tag)?, mask))
}

fn make_pair(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticDomainSpec,
    cat: &str,
    pool: &[&str],
    shift: Option<&ShiftParams>,
) -> Result<(ImageSample, BinaryMask)> {
    let scene = sample_scene(rng, spec.image_size, cat, spec.distractor_prob, pool)?;
    render_scene(&scene, spec.image_size, cat, shift)
}

fn make_episodes(
    spec: &SyntheticDomainSpec,
    split: &str,
    cats: &[String],
    n: usize,
    shots: usize,
    shift: Option<&ShiftParams>,
) -> Result<Vec<Episode>> {
    let pool: Vec<&str> = cats.iter().map(String::as_str).collect();
    (0..n)
        .map(|i| {
            let cat = &cats[i % cats.len()];
            let mut rng = named_rng(spec.seed, &format!("synth.{split}.{i}"));
            let support = (0..shots).map(|_| make_pair(&mut rng, spec, cat, &pool, shift)).collect::<Result<Vec<_>>>()?;
            let (q, qm) = make_pair(&mut rng, spec, cat, &pool, shift)?;
            Episode::new(&format!("{split}-{i:04}"), cat, support, q, Some(qm))
        })
        .collect()
}

/// Seed-deterministic source/target splits.
pub fn generate_synthetic(spec: &SyntheticDomainSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let shift = Some(&spec.shift);
    let target_pool: Vec<&str> = spec.target_categories.iter().map(String::as_str).collect();
    let target_finetune = spec
        .target_categories
        .iter()
        .map(|cat| {
            let mut rng = named_rng(spec.seed, &format!("synth.target-finetune.{cat}"));
            let pairs =
                (0..spec.finetune_pairs).map(|_| make_pair(&mut rng, spec, cat, &target_pool, shift)).collect::<Result<Vec<_>>>()?;
            Ok(SupportPool { category: cat.clone(), pairs })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticData {
        source_train: make_episodes(spec, "source-train", &spec.source_categories, spec.train_episodes, 1, None)?,
        source_heldout: make_episodes(spec, "source-heldout", &spec.heldout_categories, spec.eval_episodes, spec.max_shots, None)?,
        target_finetune,
        target_test: make_episodes(spec, "target-test", &spec.target_categories, spec.eval_episodes, spec.max_shots, shift)?,
    })
}

/// Share of non-DC amplitude energy at frequencies above half the Nyquist band.
pub fn band_energy_ratio(img: &ImageSample) -> Result<f64> {
    let (h, w) = (img.height(), img.width());
    let spec = fft2(&FeatureMap::new(3, h, w, img.pixels().to_vec())?)?;
    let (mut high, mut total) = (0.0, 0.0);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                if y == 0 && x == 0 {
                    continue;
                }
                let a = spec.amplitude()[(c * h + y) * w + x];
                let e = a * a;
                let fy = y.min(h - y);
                let fx = x.min(w - x);
                total += e;
                if 4 * fy > h || 4 * fx > w {
                    high += e;
                }
            }
        }
    }
    Ok(if total == 0.0 { 0.0 } else { high / total })
}
