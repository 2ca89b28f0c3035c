//! The assembled segmentation pipeline.

use std::collections::BTreeMap;

use log::debug;

use crate::cmpg::{self, CmpgDims, PromptVars};
use crate::decoder::{self, DecoderDims, SegLogits};
use crate::encoders::{BinaryMask, EncoderSet, EncoderSpec, FeatureLayer};
use crate::error::{Error, Result};
use crate::fai::{self, FaiConfig, FaiSwitches, MemoryBank, SpectrumCache};
use crate::graph::{Graph, Var};
use crate::numerics::FeatureMap;
use crate::params::ParamStore;
use crate::rct::{
    build_text_prototypes, build_visual_prototypes, prior_quad, CategoryExpander, CategoryExpansion, ExpansionSource, SpatialPrior,
    FALLBACK_NEGATIVE,
};
use crate::tensor::Tensor;
use crate::training::{Checkpoint, Episode};

/// Checkpoint meta key holding how many bank slots were populated.
pub const BANK_FILLED_META: &str = "fai.filled";

/// Module switches; `true` means enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Switches {
    pub cmpg: bool,
    pub rct_semantic_expansion: bool,
    pub fai: bool,
    pub cdfa: bool,
    pub sqfe: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self { cmpg: true, rct_semantic_expansion: true, fai: true, cdfa: true, sqfe: true }
    }
}

impl Switches {
    pub const NAMES: [&'static str; 5] = ["cmpg", "rct_semantic_expansion", "fai", "fai.cdfa", "fai.sqfe"];

    fn slot(&mut self, name: &str) -> Result<&mut bool> {
        Ok(match name {
            "cmpg" => &mut self.cmpg,
            "rct_semantic_expansion" => &mut self.rct_semantic_expansion,
            "fai" => &mut self.fai,
            "fai.cdfa" => &mut self.cdfa,
            "fai.sqfe" => &mut self.sqfe,
            other => {
                return Err(Error::config("switches", format!("unknown switch `{other}`; expected one of {}", Self::NAMES.join(", "))))
            }
        })
    }

    pub fn set(&mut self, name: &str, enabled: bool) -> Result<()> {
        *self.slot(name)? = enabled;
        Ok(())
    }

    pub fn without(mut self, name: &str) -> Result<Self> {
        self.set(name, false)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Result<bool> {
        let mut copy = *self;
        Ok(*copy.slot(name)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub seed: u64,
    pub image_encoder: String,
    pub text_encoder: String,
    pub feature_layer: FeatureLayer,
    pub image_size: usize,
    pub patch_stride: usize,
    /// `C`, channels of the aligned image features.
    pub feature_dim: usize,
    /// `D`, width of prototypes and patch features.
    pub proto_dim: usize,
    /// `D_p`
    pub prompt_dim: usize,
    pub mask_hidden: usize,
    pub sparse_tokens: usize,
    /// `J`
    pub negatives: usize,
    pub fai: FaiConfig,
    pub switches: Switches,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_encoder: "toy".into(),
            text_encoder: "toy".into(),
            feature_layer: FeatureLayer::Final,
            image_size: 32,
            patch_stride: 4,
            feature_dim: 16,
            proto_dim: 32,
            prompt_dim: 64,
            mask_hidden: 16,
            sparse_tokens: 2,
            negatives: 3,
            fai: FaiConfig::default(),
            switches: Switches::default(),
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_stride
    }

    pub fn cmpg_dims(&self) -> CmpgDims {
        CmpgDims {
            proto_dim: self.proto_dim,
            prompt_dim: self.prompt_dim,
            feature_dim: self.feature_dim,
            mask_hidden: self.mask_hidden,
            sparse_tokens: self.sparse_tokens,
        }
    }

    pub fn decoder_dims(&self) -> DecoderDims {
        DecoderDims { in_channels: 2 * self.feature_dim + cmpg::PRIOR_CHANNELS, prompt_dim: self.prompt_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_stride == 0 || !self.image_size.is_multiple_of(self.patch_stride) {
            return Err(Error::config("patch_stride", "must divide image_size"));
        }
        if self.grid() < 2 {
            return Err(Error::config("image_size", "feature grid must be at least 2×2"));
        }
        if self.prompt_dim == 0 {
            return Err(Error::config("prompt_dim", "must be positive"));
        }
        if self.sparse_tokens == 0 {
            return Err(Error::config("sparse_tokens", "must be at least 1"));
        }
        if self.negatives == 0 {
            return Err(Error::config("negatives", "J must be at least 1"));
        }
        if self.fai.slots == 0 {
            return Err(Error::config("fai.T", "must be at least 1"));
        }
        Ok(())
    }
}

fn mean_vector(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += x / vs.len() as f64);
    }
    out
}

/// Everything about an episode that does not depend on trainable parameters.
#[derive(Clone, Debug)]
pub struct PreparedEpisode {
    pub support_spectra: Vec<SpectrumCache>,
    pub support_features: Vec<FeatureMap>,
    pub query_spectrum: SpectrumCache,
    pub query_features: FeatureMap,
    /// Majority-vote support masks on the feature grid, as 0/1 weights.
    pub support_weights: Vec<Vec<f64>>,
    pub fg_protos: Vec<Vec<f64>>,
    pub bg_protos: Vec<Vec<f64>>,
    /// `4×(4·grid)×(4·grid)` shot-averaged support priors.
    pub support_priors: Tensor,
    /// `4×grid×grid` shot-averaged query priors.
    pub query_priors: Tensor,
    pub query_mask: Option<BinaryMask>,
    pub image_size: (usize, usize),
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub bank: MemoryBank,
    encoders: EncoderSet,
    expander: CategoryExpander,
}

impl Model {
    pub fn new(config: ModelConfig, expander: CategoryExpander) -> Result<Self> {
        config.validate()?;
        let spec = EncoderSpec {
            patch_stride: config.patch_stride,
            feature_dim: config.feature_dim,
            prototype_dim: config.proto_dim,
            seed: config.seed,
        };
        let encoders = EncoderSet::build(&config.image_encoder, &config.text_encoder, config.feature_layer, spec)?;
        let mut params = ParamStore::new();
        cmpg::init_params(&mut params, config.seed, &config.cmpg_dims());
        fai::init_params(&mut params, config.feature_dim, &config.fai);
        decoder::init_params(&mut params, config.seed, &config.decoder_dims());
        let bank = MemoryBank::from_config(&config.fai, config.feature_dim, config.seed)?;
        Ok(Self { config, params, bank, encoders, expander })
    }

    /// Snapshot of parameters and bank; `config` is the rendered run config.
    pub fn checkpoint(&self, config: &str, mut meta: BTreeMap<String, String>) -> Checkpoint {
        meta.insert(BANK_FILLED_META.into(), self.bank.filled().to_string());
        let bank = Tensor::new(&[self.config.fai.slots, self.config.feature_dim], self.bank.slots().to_vec());
        Checkpoint { config: config.to_string(), params: self.params.clone(), bank, meta }
    }

    /// Loads parameters and bank, checking every name and shape against the
    /// freshly initialized model.
    pub fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        let mismatch = |m: String| Error::Checkpoint(format!("{m}; was it written with a different architecture?"));
        if ck.params.len() != self.params.len() {
            return Err(mismatch(format!("{} tensors, model has {}", ck.params.len(), self.params.len())));
        }
        for (name, t) in self.params.iter() {
            let other = ck.params.get(name).ok_or_else(|| mismatch(format!("tensor `{name}` missing")))?;
            if other.shape() != t.shape() {
                return Err(mismatch(format!("tensor `{name}` has shape {:?}, expected {:?}", other.shape(), t.shape())));
            }
        }
        if ck.bank.shape() != [self.config.fai.slots, self.config.feature_dim] {
            return Err(mismatch(format!("bank shape {:?}", ck.bank.shape())));
        }
        let filled = match ck.meta.get(BANK_FILLED_META) {
            Some(v) => v.parse().map_err(|_| Error::Checkpoint(format!("bad `{BANK_FILLED_META}` entry")))?,
            None => self.config.fai.slots,
        };
        self.params = ck.params.clone();
        self.bank.restore(ck.bank.data().to_vec(), filled)
    }

    pub fn encoders(&self) -> &EncoderSet {
        &self.encoders
    }

    pub fn expander(&self) -> &CategoryExpander {
        &self.expander
    }

    fn expansion(&self, category: &str) -> Result<CategoryExpansion> {
        if self.config.switches.rct_semantic_expansion {
            self.expander.expand(category, self.config.negatives)
        } else {
            CategoryExpansion::new(category, vec![FALLBACK_NEGATIVE.to_string()], ExpansionSource::OfflineLexicon)
        }
    }

    /// Runs the frozen encoders and the reference/prior stage.
    pub fn prepare(&self, ep: &Episode) -> Result<PreparedEpisode> {
        let size = (ep.query.height(), ep.query.width());
        if size != (self.config.image_size, self.config.image_size) {
            return Err(Error::invalid(format!(
                "episode `{}` images are {}×{}, model expects {}",
                ep.id, size.0, size.1, self.config.image_size
            )));
        }
        let exp = self.expansion(&ep.category)?;
        let (text_fg, text_bg) = build_text_prototypes(&exp, self.encoders.text.as_ref())?;
        let query_features = self.encoders.image.encode(&ep.query)?;
        let query_patches = self.encoders.patches.encode(&ep.query)?;

        let mut support_spectra = Vec::new();
        let mut support_features = Vec::new();
        let mut support_weights = Vec::new();
        let mut fg_protos = Vec::new();
        let mut bg_protos = Vec::new();
        let mut support_quads: Vec<[SpatialPrior; 4]> = Vec::new();
        let mut query_quads: Vec<[SpatialPrior; 4]> = Vec::new();
        for (img, mask) in &ep.support {
            let feat = self.encoders.image.encode(img)?;
            let patches = self.encoders.patches.encode(img)?;
            let visual = build_visual_prototypes(&patches, mask)?;
            support_quads.push(prior_quad(&patches, &visual, &text_fg, &text_bg)?);
            query_quads.push(prior_quad(&query_patches, &visual, &text_fg, &text_bg)?);
            support_weights.push(visual.grid_mask.iter().map(|&b| f64::from(u8::from(b))).collect());
            fg_protos.push(visual.foreground.vector.clone());
            if !visual.background_missing {
                bg_protos.push(visual.background.vector.clone());
            }
            support_spectra.push(SpectrumCache::new(&feat)?);
            support_features.push(feat);
        }
        // one visual prototype per polarity whatever the shot count, so the
        // attention set matches what training saw
        let mut fg_protos = vec![mean_vector(&fg_protos)];
        let mut bg_protos = if bg_protos.is_empty() { Vec::new() } else { vec![mean_vector(&bg_protos)] };
        fg_protos.push(text_fg.vector.clone());
        bg_protos.extend(text_bg.iter().map(|p| p.vector.clone()));

        let g = self.config.grid();
        let support_priors = cmpg::prior_stack(&support_quads, 4 * g, 4 * g)?;
        let query_priors = cmpg::prior_stack(&query_quads, g, g)?;
        Ok(PreparedEpisode {
            support_spectra,
            support_features,
            query_spectrum: SpectrumCache::new(&query_features)?,
            query_features,
            support_weights,
            fg_protos,
            bg_protos,
            support_priors,
            query_priors,
            query_mask: ep.query_mask.clone(),
            image_size: size,
        })
    }

    /// Records the trainable forward pass; returns `1×H×W` logits. The bank is
    /// refreshed when `training`.
    pub fn forward(&self, g: &mut Graph, params: &ParamStore, bank: &mut MemoryBank, ep: &PreparedEpisode, training: bool) -> Result<Var> {
        let sw = self.config.switches;
        let (fs, fq) = if sw.fai {
            let switches = FaiSwitches { cdfa: sw.cdfa, sqfe: sw.sqfe };
            fai::fai_graph(g, params, &ep.support_spectra, &ep.query_spectrum, bank, self.config.fai.norm, switches, training)?
        } else {
            let fs = ep.support_features.iter().map(|f| g.constant(f.to_tensor())).collect();
            (fs, g.constant(ep.query_features.to_tensor()))
        };

        let protos: Vec<Var> = fs.iter().zip(&ep.support_weights).map(|(f, w)| g.masked_mean(*f, w)).collect();
        let proto = g.mean(&protos);
        let cond = g.mul_channel(fq, proto);
        let priors = g.constant(ep.query_priors.clone());
        let input = g.concat(&[fq, cond, priors]);

        let prompt = self.prompt(g, params, ep, fq)?;
        let (h, w) = ep.image_size;
        decoder::decode(g, params, input, Some(prompt), h, w)
    }

    fn prompt(&self, g: &mut Graph, params: &ParamStore, ep: &PreparedEpisode, fq: Var) -> Result<PromptVars> {
        let dims = self.config.cmpg_dims();
        let mask_emb = cmpg::encode_mask_prompt(g, params, ep.support_priors.clone())?;
        if !self.config.switches.cmpg {
            return Ok(cmpg::prior_only_prompt(g, &dims, mask_emb));
        }
        let consts =
            |g: &mut Graph, vs: &[Vec<f64>]| -> Vec<Var> { vs.iter().map(|v| g.constant(Tensor::new(&[v.len()], v.clone()))).collect() };
        let fg = consts(g, &ep.fg_protos);
        let bg = consts(g, &ep.bg_protos);
        let p_fg = cmpg::enhance_prototypes(g, params, crate::rct::Polarity::Foreground, &fg)?;
        let p_bg = cmpg::enhance_prototypes(g, params, crate::rct::Polarity::Background, &bg)?;
        let sem = cmpg::compose_semantic(g, params, p_fg, p_bg)?;
        cmpg::align_prompts(g, params, &dims, sem, mask_emb, fq)
    }

    /// Inference on a prepared episode; never touches the stored bank.
    pub fn logits(&self, ep: &PreparedEpisode) -> Result<SegLogits> {
        let mut g = Graph::inference();
        let mut bank = self.bank.clone();
        let out = self.forward(&mut g, &self.params, &mut bank, ep, false)?;
        Ok(SegLogits::from_tensor(g.value(out)))
    }

    pub fn predict(&self, ep: &Episode) -> Result<BinaryMask> {
        let prepared = self.prepare(ep)?;
        let mask = self.logits(&prepared)?.to_mask();
        debug!("episode {}: {} foreground pixels", ep.id, mask.count());
        Ok(mask)
    }
}
