//! Flat `key = value` run configuration shared by every subcommand.
//!
//! One `seed` drives model initialization, data generation, shuffling and
//! augmentation. Unknown keys are rejected by name.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evalkit::SyntheticDomainSpec;
use crate::fai::{BankInit, SqfeNorm};
use crate::model::{Model, ModelConfig, Switches};
use crate::rct::{CategoryExpander, ExpanderConfig, Lexicon};
use crate::training::{FinetuneConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    /// Support shots used by `evaluate` and `predict`.
    pub eval_shots: usize,
    pub data: SyntheticDomainSpec,
    pub data_root: PathBuf,
    pub llm: ExpanderConfig,
    /// Offline lexicon file; the synthetic category lists are used when unset.
    pub lexicon_path: Option<PathBuf>,
    pub ablate_switches: Vec<String>,
    pub ablate_finetune: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval_shots: 1,
            data: SyntheticDomainSpec::default(),
            data_root: PathBuf::from("data"),
            llm: ExpanderConfig::default(),
            lexicon_path: None,
            ablate_switches: Switches::NAMES.iter().map(|s| s.to_string()).collect(),
            ablate_finetune: true,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

fn optional(v: &str) -> Option<String> {
    (!v.is_empty()).then(|| v.to_string())
}

fn norm_name(n: SqfeNorm) -> &'static str {
    match n {
        SqfeNorm::Standardize => "standardize",
        SqfeNorm::Identity => "identity",
    }
}

fn bank_init_name(b: BankInit) -> &'static str {
    match b {
        BankInit::Warmup => "warmup",
        BankInit::Random => "random",
    }
}

impl RunConfig {
    /// Every accepted key in rendering order.
    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "seed" => self.seed = num(key, v)?,
            "encoder" => m.image_encoder = v.to_string(),
            "text_encoder" => m.text_encoder = v.to_string(),
            "encoder.feature_layer" => m.feature_layer = v.parse()?,
            "image_size" => {
                m.image_size = num(key, v)?;
                self.data.image_size = m.image_size;
            }
            "patch_stride" => m.patch_stride = num(key, v)?,
            "feature_dim" => m.feature_dim = num(key, v)?,
            "proto_dim" => m.proto_dim = num(key, v)?,
            "prompt_dim" => m.prompt_dim = num(key, v)?,
            "mask_hidden" => m.mask_hidden = num(key, v)?,
            "sparse_tokens" => m.sparse_tokens = num(key, v)?,
            "negatives" => m.negatives = num(key, v)?,
            "fai.T" => m.fai.slots = num(key, v)?,
            "fai.tau" => m.fai.tau = num(key, v)?,
            "fai.alpha" => m.fai.alpha = num(key, v)?,
            "fai.gamma_init" => m.fai.gamma_init = num(key, v)?,
            "fai.freeze_bank" => m.fai.freeze_bank = boolean(key, v)?,
            "fai.bank_init" => m.fai.bank_init = v.parse()?,
            "fai.norm" => {
                m.fai.norm = match v {
                    "standardize" => SqfeNorm::Standardize,
                    "identity" => SqfeNorm::Identity,
                    _ => return Err(Error::config(key, format!("expected standardize|identity, got `{v}`"))),
                }
            }
            "loss.lambda" => {
                self.train.loss.lambda = num(key, v)?;
                self.finetune.train.loss.lambda = self.train.loss.lambda;
            }
            "loss.dice_smooth" => {
                self.train.loss.delta = num(key, v)?;
                self.finetune.train.loss.delta = self.train.loss.delta;
            }
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.batch" => self.train.batch = num(key, v)?,
            "finetune.epochs" => self.finetune.train.epochs = num(key, v)?,
            "finetune.lr" => self.finetune.train.lr = num(key, v)?,
            "finetune.batch" => self.finetune.train.batch = num(key, v)?,
            "finetune.shots" => self.finetune.shots = num(key, v)?,
            "finetune.flip_p" => self.finetune.augment.flip_p = num(key, v)?,
            "finetune.jitter" => self.finetune.augment.jitter = num(key, v)?,
            "finetune.rotate_deg" => self.finetune.augment.rotate_deg = num(key, v)?,
            "finetune.translate" => self.finetune.augment.translate = num(key, v)?,
            "eval.shots" => self.eval_shots = num(key, v)?,
            "data.root" => self.data_root = PathBuf::from(v),
            "data.source_categories" => self.data.source_categories = list(v),
            "data.heldout_categories" => self.data.heldout_categories = list(v),
            "data.target_categories" => self.data.target_categories = list(v),
            "data.train_episodes" => self.data.train_episodes = num(key, v)?,
            "data.eval_episodes" => self.data.eval_episodes = num(key, v)?,
            "data.finetune_pairs" => self.data.finetune_pairs = num(key, v)?,
            "data.max_shots" => self.data.max_shots = num(key, v)?,
            "data.distractor_prob" => self.data.distractor_prob = num(key, v)?,
            "data.shift.invert" => self.data.shift.invert = boolean(key, v)?,
            "data.shift.texture_amp" => self.data.shift.texture_amp = num(key, v)?,
            "data.shift.texture_period" => self.data.shift.texture_period = num(key, v)?,
            "data.shift.contrast" => self.data.shift.contrast = num(key, v)?,
            "llm.endpoint" => self.llm.endpoint = optional(v),
            "llm.model" => self.llm.model = v.to_string(),
            "llm.offline" => self.llm.offline = boolean(key, v)?,
            "rct.fallback" => self.llm.fallback = boolean(key, v)?,
            "rct.lexicon" => self.lexicon_path = optional(v).map(PathBuf::from),
            "ablate.switches" => self.ablate_switches = list(v),
            "ablate.finetune" => self.ablate_finetune = boolean(key, v)?,
            _ => {
                if let Some(name) = key.strip_prefix("switches.") {
                    let on = boolean(key, v)?;
                    return self.model.switches.set(name, on).map_err(|_| Error::config(key, "unknown config key"));
                }
                return Err(Error::config(key, "unknown config key"));
            }
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let d = &self.data;
        let ft = &self.finetune;
        let path = |p: &Path| p.display().to_string();
        let mut out = vec![
            ("seed", self.seed.to_string()),
            ("encoder", m.image_encoder.clone()),
            ("text_encoder", m.text_encoder.clone()),
            ("encoder.feature_layer", m.feature_layer.name().to_string()),
            ("image_size", m.image_size.to_string()),
            ("patch_stride", m.patch_stride.to_string()),
            ("feature_dim", m.feature_dim.to_string()),
            ("proto_dim", m.proto_dim.to_string()),
            ("prompt_dim", m.prompt_dim.to_string()),
            ("mask_hidden", m.mask_hidden.to_string()),
            ("sparse_tokens", m.sparse_tokens.to_string()),
            ("negatives", m.negatives.to_string()),
            ("fai.T", m.fai.slots.to_string()),
            ("fai.tau", m.fai.tau.to_string()),
            ("fai.alpha", m.fai.alpha.to_string()),
            ("fai.gamma_init", m.fai.gamma_init.to_string()),
            ("fai.freeze_bank", m.fai.freeze_bank.to_string()),
            ("fai.bank_init", bank_init_name(m.fai.bank_init).to_string()),
            ("fai.norm", norm_name(m.fai.norm).to_string()),
        ];
        for (key, name) in [
            ("switches.cmpg", "cmpg"),
            ("switches.rct_semantic_expansion", "rct_semantic_expansion"),
            ("switches.fai", "fai"),
            ("switches.fai.cdfa", "fai.cdfa"),
            ("switches.fai.sqfe", "fai.sqfe"),
        ] {
            out.push((key, m.switches.get(name).expect("known switch").to_string()));
        }
        out.extend([
            ("loss.lambda", self.train.loss.lambda.to_string()),
            ("loss.dice_smooth", self.train.loss.delta.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.batch", self.train.batch.to_string()),
            ("finetune.epochs", ft.train.epochs.to_string()),
            ("finetune.lr", ft.train.lr.to_string()),
            ("finetune.batch", ft.train.batch.to_string()),
            ("finetune.shots", ft.shots.to_string()),
            ("finetune.flip_p", ft.augment.flip_p.to_string()),
            ("finetune.jitter", ft.augment.jitter.to_string()),
            ("finetune.rotate_deg", ft.augment.rotate_deg.to_string()),
            ("finetune.translate", ft.augment.translate.to_string()),
            ("eval.shots", self.eval_shots.to_string()),
            ("data.root", path(&self.data_root)),
            ("data.source_categories", d.source_categories.join(", ")),
            ("data.heldout_categories", d.heldout_categories.join(", ")),
            ("data.target_categories", d.target_categories.join(", ")),
            ("data.train_episodes", d.train_episodes.to_string()),
            ("data.eval_episodes", d.eval_episodes.to_string()),
            ("data.finetune_pairs", d.finetune_pairs.to_string()),
            ("data.max_shots", d.max_shots.to_string()),
            ("data.distractor_prob", d.distractor_prob.to_string()),
            ("data.shift.invert", d.shift.invert.to_string()),
            ("data.shift.texture_amp", d.shift.texture_amp.to_string()),
            ("data.shift.texture_period", d.shift.texture_period.to_string()),
            ("data.shift.contrast", d.shift.contrast.to_string()),
            ("llm.endpoint", self.llm.endpoint.clone().unwrap_or_default()),
            ("llm.model", self.llm.model.clone()),
            ("llm.offline", self.llm.offline.to_string()),
            ("rct.fallback", self.llm.fallback.to_string()),
            ("rct.lexicon", self.lexicon_path.as_deref().map(path).unwrap_or_default()),
            ("ablate.switches", self.ablate_switches.join(", ")),
            ("ablate.finetune", self.ablate_finetune.to_string()),
        ]);
        out
    }

    /// Canonical snapshot; parsing it yields an equal config.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment at
    /// the beginning of a line or after whitespace.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::config(line, format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, format!("line {}: key given twice", i + 1)));
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// `key=value` command-line overrides.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::config(kv, "override must look like key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.loss.validate()?;
        self.finetune.augment.validate()?;
        self.data.validate()?;
        let f = &self.model.fai;
        let checks = [
            ("fai.tau", (-1.0..=1.0).contains(&f.tau)),
            ("fai.alpha", (0.0..=1.0).contains(&f.alpha)),
            ("fai.gamma_init", f.gamma_init.is_finite()),
            ("train.lr", self.train.lr > 0.0 && self.train.lr.is_finite()),
            ("train.batch", self.train.batch >= 1),
            ("finetune.lr", self.finetune.train.lr > 0.0 && self.finetune.train.lr.is_finite()),
            ("finetune.batch", self.finetune.train.batch >= 1),
            ("finetune.shots", self.finetune.shots >= 1),
            ("eval.shots", self.eval_shots >= 1),
            ("llm.endpoint", self.llm.offline || self.llm.endpoint.is_some()),
        ];
        if let Some((key, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Err(Error::config(*key, "value out of range"));
        }
        for s in &self.ablate_switches {
            Switches::default().without(s).map_err(|_| Error::config("ablate.switches", format!("unknown switch `{s}`")))?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { seed: self.seed, ..self.model.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let mut ft = self.finetune.clone();
        ft.train.seed = self.seed;
        ft
    }

    pub fn synthetic_spec(&self) -> SyntheticDomainSpec {
        SyntheticDomainSpec { seed: self.seed, image_size: self.model.image_size, ..self.data.clone() }
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        match &self.lexicon_path {
            Some(p) => Lexicon::load(p).map_err(|e| Error::config("rct.lexicon", e.to_string())),
            None => Ok(self.data.lexicon()),
        }
    }

    pub fn expander(&self) -> Result<CategoryExpander> {
        Ok(CategoryExpander::new(self.llm.clone(), self.lexicon()?))
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::new(self.model_config(), self.expander()?)
    }
}

fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'#' && (i == 0 || bytes[i - 1].is_ascii_whitespace()) {
            return &line[..i];
        }
    }
    line
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut c = RunConfig::default();
        c.set("fai.tau", "0.25").unwrap();
        c.set("switches.fai.sqfe", "false").unwrap();
        c.set("llm.endpoint", "http://localhost:9/v1/chat/completions#frag").unwrap();
        c.set("train.lr", "0.0003").unwrap();
        let back = RunConfig::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.render(), c.render());
    }

    #[test]
    fn every_rendered_key_is_settable() {
        let d = RunConfig::default();
        for (k, v) in d.entries() {
            let mut c = RunConfig::default();
            c.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
            assert_eq!(c, d, "{k}");
        }
    }

    #[test]
    fn comments_and_overrides() {
        let mut c = RunConfig::parse("# header\nseed = 7  # trailing\n\ntrain.epochs=3\n").unwrap();
        assert_eq!((c.seed, c.train.epochs), (7, 3));
        c.apply_override("train.epochs=0").unwrap();
        assert_eq!(c.train_config().epochs, 0);
        assert_eq!(c.model_config().seed, 7);
    }

    #[test]
    fn unknown_and_bad_keys_are_named() {
        let key_of = |e: Error| match e {
            Error::Config { key, .. } => key,
            other => panic!("unexpected {other}"),
        };
        assert_eq!(key_of(RunConfig::parse("bogus.key = 1").unwrap_err()), "bogus.key");
        assert_eq!(key_of(RunConfig::parse("switches.nope = true").unwrap_err()), "switches.nope");
        assert_eq!(key_of(RunConfig::parse("fai.T = many").unwrap_err()), "fai.T");
        assert_eq!(key_of(RunConfig::parse("seed = 1\nseed = 2").unwrap_err()), "seed");
        let mut c = RunConfig::default();
        c.set("loss.lambda", "1.5").unwrap();
        assert_eq!(key_of(c.validate().unwrap_err()), "loss.lambda");
        let mut c = RunConfig::default();
        c.set("finetune.shots", "0").unwrap();
        assert_eq!(key_of(c.validate().unwrap_err()), "finetune.shots");
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert!(RunConfig::keys().contains(&"fai.freeze_bank"));
    }
}
