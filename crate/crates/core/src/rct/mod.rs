//! Reference complement and transformation: negative-category expansion,
//! text/visual prototypes, and cosine spatial priors.

pub mod lexicon;
pub mod llm;

use std::collections::HashMap;
use std::sync::Mutex;

use log::warn;

use crate::encoders::{BinaryMask, TextEncoder};
use crate::error::{Error, Result};
use crate::numerics::{cosine_unchecked, FeatureMap};

pub use lexicon::Lexicon;
pub use llm::LlmClient;

/// Generic negative used to pad short expansions.
pub const FALLBACK_NEGATIVE: &str = "background";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpansionSource {
    RemoteLlm,
    OfflineLexicon,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryExpansion {
    pub target: String,
    pub negatives: Vec<String>,
    pub source: ExpansionSource,
}

impl CategoryExpansion {
    pub fn new(target: &str, negatives: Vec<String>, source: ExpansionSource) -> Result<Self> {
        let t = target.trim().to_lowercase();
        if negatives.is_empty() {
            return Err(Error::invalid(format!("expansion of `{target}` has no negatives")));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &negatives {
            let key = n.trim().to_lowercase();
            if key == t {
                return Err(Error::invalid(format!("target `{target}` listed as its own negative")));
            }
            if !seen.insert(key) {
                return Err(Error::invalid(format!("duplicate negative `{n}`")));
            }
        }
        Ok(Self { target: target.to_string(), negatives, source })
    }
}

/// Drops the target and duplicates (case-insensitive), keeps at most `j`, and
/// pads with [`FALLBACK_NEGATIVE`] when short and padding is allowed.
pub fn filter_negatives(target: &str, candidates: &[String], j: usize, pad: bool) -> Vec<String> {
    let t = target.trim().to_lowercase();
    let mut seen = std::collections::HashSet::new();
    let mut out: Vec<String> = candidates
        .iter()
        .map(|c| c.trim())
        .filter(|c| !c.is_empty())
        .filter(|c| {
            let key = c.to_lowercase();
            key != t && seen.insert(key)
        })
        .take(j)
        .map(str::to_string)
        .collect();
    if pad && out.len() < j && t != FALLBACK_NEGATIVE && !seen.contains(FALLBACK_NEGATIVE) {
        out.push(FALLBACK_NEGATIVE.to_string());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpanderConfig {
    /// Chat-completion URL; `None` means offline.
    pub endpoint: Option<String>,
    pub model: String,
    pub offline: bool,
    pub fallback: bool,
}

impl Default for ExpanderConfig {
    fn default() -> Self {
        Self { endpoint: None, model: "gpt-4o-mini".into(), offline: true, fallback: true }
    }
}

/// Resolves target categories into negative sets, caching by `(target, J)`.
pub struct CategoryExpander {
    config: ExpanderConfig,
    lexicon: Lexicon,
    client: Option<LlmClient>,
    cache: Mutex<HashMap<(String, usize), CategoryExpansion>>,
}

impl CategoryExpander {
    pub fn new(config: ExpanderConfig, lexicon: Lexicon) -> Self {
        let client = match (&config.endpoint, config.offline) {
            (Some(url), false) => Some(LlmClient::new(url, &config.model)),
            _ => None,
        };
        Self { config, lexicon, client, cache: Mutex::new(HashMap::new()) }
    }

    pub fn offline(lexicon: Lexicon) -> Self {
        Self::new(ExpanderConfig::default(), lexicon)
    }

    pub fn with_client(mut self, client: LlmClient) -> Self {
        self.client = Some(client);
        self
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn expand(&self, target: &str, j: usize) -> Result<CategoryExpansion> {
        if j == 0 {
            return Err(Error::config("negatives", "J must be at least 1"));
        }
        let key = (target.trim().to_lowercase(), j);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let exp = self.expand_uncached(target, j)?;
        self.cache.lock().expect("cache lock").insert(key, exp.clone());
        Ok(exp)
    }

    fn expand_uncached(&self, target: &str, j: usize) -> Result<CategoryExpansion> {
        let fail = |reason: &str| Error::Expansion { target: target.to_string(), reason: reason.to_string() };
        if let Some(client) = &self.client {
            match client.ask(target) {
                Ok(answer) => {
                    let negatives = filter_negatives(target, &llm::parse_answer(&answer), j, self.config.fallback);
                    if !negatives.is_empty() {
                        return CategoryExpansion::new(target, negatives, ExpansionSource::RemoteLlm);
                    }
                }
                Err(e) => warn!("falling back to the offline lexicon: {e}"),
            }
        }
        let candidates = self.lexicon.get(target).unwrap_or_default();
        if candidates.is_empty() && !self.config.fallback {
            return Err(fail(
                "no language model reachable and no lexicon entry; add a `target: neg1, neg2` line to the \
                 lexicon (rct.lexicon), set llm.endpoint, or enable rct.fallback",
            ));
        }
        let negatives = filter_negatives(target, candidates, j, self.config.fallback);
        if negatives.is_empty() {
            return Err(fail("every candidate negative was filtered out"));
        }
        CategoryExpansion::new(target, negatives, ExpansionSource::OfflineLexicon)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Foreground,
    Background,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Text,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub polarity: Polarity,
    pub modality: Modality,
}

/// Text prototypes: one foreground, one background per negative.
pub fn build_text_prototypes(exp: &CategoryExpansion, encoder: &dyn TextEncoder) -> Result<(Prototype, Vec<Prototype>)> {
    let fg = Prototype { vector: encoder.encode(&exp.target)?, polarity: Polarity::Foreground, modality: Modality::Text };
    let bg = exp
        .negatives
        .iter()
        .map(|n| Ok(Prototype { vector: encoder.encode(n)?, polarity: Polarity::Background, modality: Modality::Text }))
        .collect::<Result<Vec<_>>>()?;
    Ok((fg, bg))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualPrototypes {
    pub foreground: Prototype,
    pub background: Prototype,
    /// Set when no background cell survived downsampling; the background
    /// prototype is then the zero vector.
    pub background_missing: bool,
    /// Foreground cells on the feature grid, row-major.
    pub grid_mask: Vec<bool>,
}

/// Masked average pooling of `feat` over the mask's foreground and background.
pub fn build_visual_prototypes(feat: &FeatureMap, mask: &BinaryMask) -> Result<VisualPrototypes> {
    let (d, h, w) = feat.shape();
    if !mask.height().is_multiple_of(h) || !mask.width().is_multiple_of(w) || mask.height() / h != mask.width() / w {
        return Err(Error::invalid(format!("mask {}×{} does not tile feature grid {h}×{w}", mask.height(), mask.width())));
    }
    let grid = mask.downsample_majority(mask.height() / h)?;
    let (mut fg, mut bg) = (vec![0.0; d], vec![0.0; d]);
    let (mut nf, mut nb) = (0usize, 0usize);
    for (l, &is_fg) in grid.iter().enumerate() {
        let (acc, n) = if is_fg { (&mut fg, &mut nf) } else { (&mut bg, &mut nb) };
        *n += 1;
        for (c, a) in acc.iter_mut().enumerate() {
            *a += feat.values()[c * h * w + l];
        }
    }
    if nf == 0 {
        return Err(Error::DegenerateMask("no foreground cell after downsampling to the feature grid".into()));
    }
    fg.iter_mut().for_each(|v| *v /= nf as f64);
    if nb > 0 {
        bg.iter_mut().for_each(|v| *v /= nb as f64);
    } else {
        warn!("support mask leaves no background cell; using a zero background prototype");
    }
    Ok(VisualPrototypes {
        foreground: Prototype { vector: fg, polarity: Polarity::Foreground, modality: Modality::Visual },
        background: Prototype { vector: bg, polarity: Polarity::Background, modality: Modality::Visual },
        background_missing: nb == 0,
        grid_mask: grid,
    })
}

/// A per-location cosine map in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialPrior {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub polarity: Polarity,
    pub modality: Modality,
}

/// Cosine between every feature column and `p`.
pub fn compute_prior(feat: &FeatureMap, p: &Prototype) -> Result<SpatialPrior> {
    compute_prior_max(feat, std::slice::from_ref(p))
}

/// Per-location maximum cosine over a set of prototypes sharing polarity and modality.
pub fn compute_prior_max(feat: &FeatureMap, protos: &[Prototype]) -> Result<SpatialPrior> {
    let (d, h, w) = feat.shape();
    let first = protos.first().ok_or_else(|| Error::invalid("no prototypes to compute a prior from"))?;
    if let Some(bad) = protos.iter().find(|p| p.vector.len() != d) {
        return Err(Error::invalid(format!("prototype dim {} vs feature channels {d}", bad.vector.len())));
    }
    let mut column = vec![0.0; d];
    let values = (0..h * w)
        .map(|l| {
            for (c, v) in column.iter_mut().enumerate() {
                *v = feat.values()[c * h * w + l];
            }
            protos.iter().map(|p| cosine_unchecked(&column, &p.vector)).fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(SpatialPrior { height: h, width: w, values, polarity: first.polarity, modality: first.modality })
}

/// The four priors of one feature map, ordered fg-visual, bg-visual, fg-text, bg-text.
pub fn prior_quad(feat: &FeatureMap, visual: &VisualPrototypes, text_fg: &Prototype, text_bg: &[Prototype]) -> Result<[SpatialPrior; 4]> {
    Ok([
        compute_prior(feat, &visual.foreground)?,
        compute_prior(feat, &visual.background)?,
        compute_prior(feat, text_fg)?,
        compute_prior_max(feat, text_bg)?,
    ])
}
